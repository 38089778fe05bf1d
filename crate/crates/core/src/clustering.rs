//! Neighborhood construction: K-means++ seeding, Lloyd iterations, the
//! entity -> cluster dictionary and centroid distance queries.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg_data::{EntityId, Vocab};
use crate::lemb;
use crate::rng::{stream_rng, Stream};
use crate::text_embedding::EmbeddingMatrix;

pub const HEADER_FILE: &str = "cluster.json";
pub const CENTROIDS_FILE: &str = "centroids.lemb";
pub const ASSIGNMENT_FILE: &str = "assignment.bin";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid displacement.
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iter: 1000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    k: usize,
    dim: usize,
    /// `k x dim`, row-major.
    centroids: Vec<f64>,
    assignment: Vec<u32>,
    members: Vec<Vec<EntityId>>,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after each assignment step; non-increasing.
    pub inertia_history: Vec<f64>,
    pub seed: u64,
}

impl ClusterModel {
    /// Assembles a model from explicit centroids and assignment.
    pub fn from_parts(dim: usize, centroids: Vec<f64>, assignment: Vec<u32>, inertia: f64) -> Result<Self> {
        if dim == 0 || !centroids.len().is_multiple_of(dim) || centroids.is_empty() {
            return Err(Error::Shape(format!(
                "{} centroid values do not form rows of width {dim}",
                centroids.len()
            )));
        }
        let k = centroids.len() / dim;
        let mut members = vec![Vec::new(); k];
        for (e, &c) in assignment.iter().enumerate() {
            members
                .get_mut(c as usize)
                .ok_or_else(|| Error::Shape(format!("entity {e} assigned to cluster {c}, but k = {k}")))?
                .push(e as EntityId);
        }
        Ok(Self {
            k,
            dim,
            centroids,
            assignment,
            members,
            inertia,
            iterations_run: 0,
            inertia_history: Vec::new(),
            seed: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_entities(&self) -> usize {
        self.assignment.len()
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn members(&self, c: usize) -> &[EntityId] {
        &self.members[c]
    }

    /// Euclidean distance from `point` to every centroid.
    pub fn centroid_distances(&self, point: &[f64]) -> Result<DistanceVector> {
        centroid_distances(point, self)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = ClusterHeader {
            k: self.k,
            z: self.dim,
            num_entities: self.num_entities(),
            inertia: self.inertia,
            seed: self.seed,
            iterations_run: self.iterations_run,
        };
        let path = dir.join(HEADER_FILE);
        fs::write(&path, serde_json::to_string_pretty(&header)? + "\n").map_err(|e| Error::io(&path, e))?;
        let f32s: Vec<f32> = self.centroids.iter().map(|&v| v as f32).collect();
        lemb::write_file(dir.join(CENTROIDS_FILE), self.k, self.dim, &f32s)?;
        let bytes: Vec<u8> = self.assignment.iter().flat_map(|c| c.to_le_bytes()).collect();
        let path = dir.join(ASSIGNMENT_FILE);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(HEADER_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: ClusterHeader = serde_json::from_str(&text)?;
        let centroids = lemb::read_file(dir.join(CENTROIDS_FILE))?;
        if centroids.rows != header.k || centroids.cols != header.z {
            return Err(Error::Shape(format!(
                "header says {}x{}, centroid file is {}x{}",
                header.k, header.z, centroids.rows, centroids.cols
            )));
        }
        let path = dir.join(ASSIGNMENT_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != header.num_entities * 4 {
            return Err(Error::Shape(format!(
                "assignment file has {} bytes, expected {}",
                bytes.len(),
                header.num_entities * 4
            )));
        }
        let assignment = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut model = Self::from_parts(
            header.z,
            centroids.data.iter().map(|&v| f64::from(v)).collect(),
            assignment,
            header.inertia,
        )?;
        model.seed = header.seed;
        model.iterations_run = header.iterations_run;
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterHeader {
    k: usize,
    z: usize,
    num_entities: usize,
    inertia: f64,
    seed: u64,
    iterations_run: usize,
}

/// Distances from one point to each centroid, index-aligned with the centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceVector(pub Vec<f64>);

impl DistanceVector {
    /// Cluster indices by ascending distance, ties broken by lower index.
    pub fn sorted_clusters(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.sort_by(|&a, &b| self.0[a].total_cmp(&self.0[b]).then(a.cmp(&b)));
        order
    }
}

pub fn centroid_distances(point: &[f64], model: &ClusterModel) -> Result<DistanceVector> {
    if point.len() != model.dim {
        return Err(Error::Shape(format!(
            "point has {} coordinates, centroids have {}",
            point.len(),
            model.dim
        )));
    }
    Ok(DistanceVector(
        (0..model.k)
            .map(|c| squared_distance(point, model.centroid(c)).sqrt())
            .collect(),
    ))
}

/// Entity id -> cluster id. Indexed by entity id.
pub fn build_cluster_dict(model: &ClusterModel, vocab: &Vocab) -> Result<Vec<u32>> {
    if model.num_entities() != vocab.len() {
        return Err(Error::Shape(format!(
            "cluster model covers {} entities, vocab has {}",
            model.num_entities(),
            vocab.len()
        )));
    }
    Ok(model.assignment.clone())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_k(x: &EmbeddingMatrix, k: usize) -> Result<()> {
    if k == 0 || k > x.rows() {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={} (number of points), got {k}",
            x.rows()
        )));
    }
    Ok(())
}

/// K-means++ seeding. Returns `k x dim` centroids taken from the rows of `x`.
pub fn kmeanspp_init<R: Rng + ?Sized>(x: &EmbeddingMatrix, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    check_k(x, k)?;
    let n = x.rows();
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut nearest: Vec<f64> = x.iter_rows().map(|r| squared_distance(r, x.row(first))).collect();

    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Every remaining row duplicates a chosen one.
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        taken[next] = true;
        for (d, row) in nearest.iter_mut().zip(x.iter_rows()) {
            *d = d.min(squared_distance(row, x.row(next)));
        }
    }

    Ok(chosen.iter().flat_map(|&i| x.row(i).iter().copied()).collect())
}

/// Nearest centroid per point (lowest index on ties) and its squared distance.
fn assign(x: &EmbeddingMatrix, centroids: &[f64], k: usize) -> Vec<(u32, f64)> {
    let dim = x.cols();
    (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let mut best = (0u32, f64::INFINITY);
            for c in 0..k {
                let d = squared_distance(row, &centroids[c * dim..(c + 1) * dim]);
                if d < best.1 {
                    best = (c as u32, d);
                }
            }
            best
        })
        .collect()
}

/// Moves each empty cluster's centroid onto the point farthest from its own
/// centroid, taken from a cluster that can spare it.
fn repair_empty_clusters(x: &EmbeddingMatrix, centroids: &mut [f64], k: usize, assigned: &mut [(u32, f64)]) {
    let dim = x.cols();
    loop {
        let mut sizes = vec![0usize; k];
        for &(c, _) in assigned.iter() {
            sizes[c as usize] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let donor = assigned
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| sizes[*c as usize] >= 2)
            .fold(None::<(usize, f64)>, |best, (i, &(_, d))| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            })
            .map(|(i, _)| i)
            .expect("k <= n leaves a cluster with two members");
        log::debug!("k-means: reseeding empty cluster {empty} at point {donor}");
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(x.row(donor));
        assigned[donor] = (empty as u32, 0.0);
    }
}

fn update_centroids(x: &EmbeddingMatrix, assigned: &[(u32, f64)], k: usize) -> Vec<f64> {
    let dim = x.cols();
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (row, &(c, _)) in x.iter_rows().zip(assigned) {
        let c = c as usize;
        counts[c] += 1;
        for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        for s in &mut sums[c * dim..(c + 1) * dim] {
            *s /= count as f64;
        }
    }
    sums
}

/// Lloyd's algorithm from K-means++ seeds.
pub fn kmeans_fit<R: Rng + ?Sized>(x: &EmbeddingMatrix, params: &KMeansParams, rng: &mut R) -> Result<ClusterModel> {
    check_k(x, params.k)?;
    if params.max_iter == 0 || !(params.tol >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "k-means needs max_iter >= 1 and tol >= 0, got {} and {}",
            params.max_iter, params.tol
        )));
    }
    let k = params.k;
    let dim = x.cols();
    let mut centroids = kmeanspp_init(x, k, rng)?;
    let mut history = Vec::new();
    let mut assigned = Vec::new();
    let mut iterations = 0;

    while iterations < params.max_iter {
        iterations += 1;
        assigned = assign(x, &centroids, k);
        repair_empty_clusters(x, &mut centroids, k, &mut assigned);
        history.push(assigned.iter().map(|&(_, d)| d).sum::<f64>());

        let updated = update_centroids(x, &assigned, k);
        let shift = (0..k)
            .map(|c| squared_distance(&updated[c * dim..(c + 1) * dim], &centroids[c * dim..(c + 1) * dim]).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < params.tol {
            break;
        }
    }

    // Final assignment against the last centroids, unless it would empty a cluster.
    let last = assign(x, &centroids, k);
    let mut sizes = vec![0usize; k];
    for &(c, _) in &last {
        sizes[c as usize] += 1;
    }
    if sizes.iter().all(|&s| s > 0) {
        assigned = last;
    } else {
        for (slot, row) in assigned.iter_mut().zip(x.iter_rows()) {
            let c = slot.0 as usize;
            slot.1 = squared_distance(row, &centroids[c * dim..(c + 1) * dim]);
        }
    }
    let inertia = assigned.iter().map(|&(_, d)| d).sum::<f64>();
    history.push(inertia);

    let mut model = ClusterModel::from_parts(dim, centroids, assigned.iter().map(|&(c, _)| c).collect(), inertia)?;
    model.iterations_run = iterations;
    model.inertia_history = history;
    Ok(model)
}

/// [`kmeans_fit`] driven by the clustering stream of `seed`.
pub fn kmeans_fit_seeded(x: &EmbeddingMatrix, params: &KMeansParams, seed: u64) -> Result<ClusterModel> {
    let mut rng = stream_rng(seed, Stream::Clustering);
    let mut model = kmeans_fit(x, params, &mut rng)?;
    model.seed = seed;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[[f64; 2]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn k_equal_n_is_a_permutation() {
        let x = matrix(&[[0.0, 0.0], [1.0, 0.0], [0.0, 5.0], [3.0, 3.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = kmeanspp_init(&x, 4, &mut rng).unwrap();
        let mut got: Vec<Vec<f64>> = c.chunks(2).map(<[f64]>::to_vec).collect();
        let mut want: Vec<Vec<f64>> = x.iter_rows().map(<[f64]>::to_vec).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);

        let model = kmeans_fit(&x, &KMeansParams::new(4), &mut rng).unwrap();
        assert_eq!(model.inertia, 0.0);
    }

    #[test]
    fn rejects_bad_k() {
        let x = matrix(&[[0.0, 0.0], [1.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(kmeanspp_init(&x, 3, &mut rng).is_err());
        assert!(kmeans_fit(&x, &KMeansParams::new(0), &mut rng).is_err());
    }

    #[test]
    fn duplicated_rows_recovered_exactly() {
        let distinct = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let rows: Vec<[f64; 2]> = (0..4).flat_map(|_| distinct).collect();
        let x = matrix(&rows);
        let model = kmeans_fit_seeded(&x, &KMeansParams::new(3), 11).unwrap();
        assert_eq!(model.inertia, 0.0);
        let mut centroids: Vec<Vec<f64>> = (0..3).map(|c| model.centroid(c).to_vec()).collect();
        centroids.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<Vec<f64>> = distinct.iter().map(|r| r.to_vec()).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(centroids, want);
    }

    #[test]
    fn duplicate_heavy_data_still_fills_k_clusters() {
        let x = matrix(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [2.0, 2.0]]);
        let model = kmeans_fit_seeded(&x, &KMeansParams::new(3), 5).unwrap();
        for c in 0..3 {
            assert!(!model.members(c).is_empty());
        }
    }

    #[test]
    fn distances_three_four_five() {
        let model = ClusterModel::from_parts(2, vec![0.0, 0.0, 3.0, 4.0], vec![0, 1], 0.0).unwrap();
        assert_eq!(centroid_distances(&[0.0, 0.0], &model).unwrap().0, vec![0.0, 5.0]);
        assert_eq!(centroid_distances(&[3.0, 4.0], &model).unwrap().0[1], 0.0);
        assert!(centroid_distances(&[0.0], &model).is_err());
    }

    #[test]
    fn sorted_clusters_breaks_ties_by_index() {
        let d = DistanceVector(vec![12.15, 9.36, 13.24, 9.36]);
        assert_eq!(d.sorted_clusters(), vec![1, 3, 0, 2]);
    }

    #[test]
    fn dict_matches_assignment() {
        let model = ClusterModel::from_parts(1, vec![0.0, 1.0], vec![0, 1, 0], 0.0).unwrap();
        let vocab = Vocab::from_labels(["a", "b", "c"]).unwrap();
        assert_eq!(build_cluster_dict(&model, &vocab).unwrap(), vec![0, 1, 0]);
        let short = Vocab::from_labels(["a"]).unwrap();
        assert!(build_cluster_dict(&model, &short).is_err());

        let single = ClusterModel::from_parts(1, vec![0.5], vec![0, 0, 0], 0.0).unwrap();
        assert_eq!(build_cluster_dict(&single, &vocab).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| vec![rng.random(), rng.random(), rng.random()])
            .collect();
        let x = EmbeddingMatrix::from_rows(&rows).unwrap();
        let model = kmeans_fit_seeded(&x, &KMeansParams::new(4), 9).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        model.save(a.path()).unwrap();
        let loaded = ClusterModel::load(a.path()).unwrap();
        loaded.save(b.path()).unwrap();
        for f in [HEADER_FILE, CENTROIDS_FILE, ASSIGNMENT_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        assert_eq!(loaded.assignment(), model.assignment());
    }
}
