//! Entity-text embedding matrices: LEMB ingestion, a hashing fallback
//! embedder, and PCA reduction.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kg_data::{EntityTextTable, Vocab};
use crate::lemb::{self, LembMatrix};

/// Dense row-major matrix; row `i` belongs to entity id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    /// Fails on shape mismatch or any non-finite value.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".to_owned()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn save_lemb(&self, path: impl AsRef<Path>) -> Result<()> {
        lemb::write_file(path, self.rows, self.cols, &self.to_f32())
    }

    pub fn from_lemb(m: &LembMatrix) -> Result<Self> {
        Self::new(m.rows, m.cols, m.data.iter().map(|&v| f64::from(v)).collect())
    }
}

pub fn read_label_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_owned())
        .collect())
}

pub fn write_label_lines(path: impl AsRef<Path>, labels: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut text = labels.join("\n");
    if !labels.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a LEMB file plus its labels file and reorders rows into vocab-id order.
///
/// Rows whose label is not in the vocab are ignored.
pub fn ingest_embedding_file(
    emb_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    vocab: &Vocab,
) -> Result<EmbeddingMatrix> {
    let raw = lemb::read_file(emb_path)?;
    let labels = read_label_lines(labels_path)?;
    align_to_vocab(&raw, &labels, vocab)
}

pub fn align_to_vocab(raw: &LembMatrix, labels: &[String], vocab: &Vocab) -> Result<EmbeddingMatrix> {
    if raw.rows != labels.len() {
        return Err(Error::Shape(format!(
            "embedding file has {} rows but labels file has {} lines",
            raw.rows,
            labels.len()
        )));
    }
    let mut row_of: HashMap<&str, usize> = HashMap::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        if row_of.insert(label, i).is_some() {
            return Err(Error::Duplicate {
                kind: "embedding label",
                label: label.clone(),
            });
        }
    }
    let mut data = Vec::with_capacity(vocab.len() * raw.cols);
    for (id, label) in vocab.labels().iter().enumerate() {
        let src = *row_of.get(label.as_str()).ok_or_else(|| Error::UnknownLabel {
            kind: "embedding row for entity",
            label: label.clone(),
        })?;
        for (col, &v) in raw.row(src).iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row: id, col });
            }
            data.push(f64::from(v));
        }
    }
    EmbeddingMatrix::new(vocab.len(), raw.cols, data)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    seed.to_le_bytes()
        .iter()
        .chain(bytes)
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Character-trigram feature hashing.
///
/// The text is wrapped as `^text$`; every window of three chars is hashed with
/// seeded FNV-1a. The low bits (mod `dim`) pick the bucket, the top bit the
/// sign. Rows are L2-normalized. A text with no trigrams, or whose signed
/// counts cancel to zero, gets the unit vector `e_(id mod dim)`.
pub fn fallback_embed(texts: &EntityTextTable, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "fallback embedding dim must be >= 2, got {dim}"
        )));
    }
    let mut data = vec![0.0f64; texts.len() * dim];
    for (id, (text, row)) in texts.iter().zip(data.chunks_exact_mut(dim)).enumerate() {
        let chars: Vec<char> = std::iter::once('^')
            .chain(text.chars())
            .chain(std::iter::once('$'))
            .collect();
        let mut buf = [0u8; 12];
        for window in chars.windows(3) {
            let mut len = 0;
            for c in window {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let h = fnv1a(seed, &buf[..len]);
            let bucket = (h % dim as u64) as usize;
            row[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            row[id % dim] = 1.0;
        }
    }
    EmbeddingMatrix::new(texts.len(), dim, data)
}

/// Linear projection onto the top principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `n_components x input_dim`, row-major, rows orthonormal.
    pub components: Vec<f64>,
    /// Per-component variance (sample covariance, `n - 1` denominator).
    pub explained_variance: Vec<f64>,
    input_dim: usize,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// `(x - mean) * components^T`
    pub fn transform(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "PCA fitted on {} columns, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        let z = self.n_components();
        let mut out = Vec::with_capacity(x.rows() * z);
        let mut centered = vec![0.0; self.input_dim];
        for row in x.iter_rows() {
            for ((c, v), m) in centered.iter_mut().zip(row).zip(&self.mean) {
                *c = v - m;
            }
            for k in 0..z {
                out.push(dot(&centered, self.component(k)));
            }
        }
        EmbeddingMatrix::new(x.rows(), z, out)
    }

    /// Maps reduced coordinates back into the input space.
    pub fn inverse_transform(&self, reduced: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if reduced.cols() != self.n_components() {
            return Err(Error::Shape(format!(
                "expected {} reduced columns, got {}",
                self.n_components(),
                reduced.cols()
            )));
        }
        let mut out = Vec::with_capacity(reduced.rows() * self.input_dim);
        for row in reduced.iter_rows() {
            let mut x = self.mean.clone();
            for (k, &coef) in row.iter().enumerate() {
                for (xi, ci) in x.iter_mut().zip(self.component(k)) {
                    *xi += coef * ci;
                }
            }
            out.extend(x);
        }
        EmbeddingMatrix::new(reduced.rows(), self.input_dim, out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits PCA by eigendecomposition of the sample covariance.
///
/// Each component is sign-normalized so its largest-magnitude coordinate is
/// positive (first such coordinate on ties).
pub fn pca_fit(x: &EmbeddingMatrix, n_components: usize) -> Result<PcaModel> {
    let (n, d) = (x.rows(), x.cols());
    let max = n.saturating_sub(1).min(d);
    if n_components == 0 || n_components > max {
        return Err(Error::InvalidArgument(format!(
            "PCA needs 1 <= components <= min(rows - 1, cols) = {max}, got {n_components}"
        )));
    }

    let mut mean = vec![0.0; d];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(n_components * d);
    let mut explained_variance = Vec::with_capacity(n_components);
    for &idx in order.iter().take(n_components) {
        let v = eig.eigenvectors.column(idx);
        let pivot = (0..d).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        components.extend(v.iter().map(|c| c * sign));
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }

    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        input_dim: d,
    })
}

/// Sum of per-column sample variances.
pub fn total_variance(x: &EmbeddingMatrix) -> f64 {
    let n = x.rows();
    if n < 2 {
        return 0.0;
    }
    (0..x.cols())
        .map(|j| {
            let mean = x.iter_rows().map(|r| r[j]).sum::<f64>() / n as f64;
            x.iter_rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            EmbeddingMatrix::new(1, 2, vec![0.0, f64::NAN]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn align_permutes_rows() {
        let raw = LembMatrix::new(3, 1, vec![30.0, 10.0, 20.0]).unwrap();
        let labels = vec!["c".to_owned(), "a".to_owned(), "b".to_owned()];
        let vocab = Vocab::from_labels(["a", "b", "c"]).unwrap();
        let m = align_to_vocab(&raw, &labels, &vocab).unwrap();
        assert_eq!(m.as_slice(), &[10.0, 20.0, 30.0]);

        let vocab = Vocab::from_labels(["a", "d"]).unwrap();
        assert!(matches!(
            align_to_vocab(&raw, &labels, &vocab),
            Err(Error::UnknownLabel { .. })
        ));
        assert!(matches!(
            align_to_vocab(&raw, &labels[..2], &vocab),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fallback_is_deterministic_and_normalized() {
        let texts = EntityTextTable::from_texts(vec!["heart".into(), "heart".into(), "lung disease".into(), "".into()]);
        let a = fallback_embed(&texts, 32, 7).unwrap();
        let b = fallback_embed(&texts, 32, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.row(0), a.row(1));
        for row in a.iter_rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        // No trigrams in "^$": basis vector keyed by id 3.
        assert_eq!(a.row(3)[3], 1.0);
        assert!(fallback_embed(&texts, 1, 0).is_err());
    }

    #[test]
    fn pca_collinear_points() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let x = EmbeddingMatrix::from_rows(&rows).unwrap();
        let pca = pca_fit(&x, 1).unwrap();
        let s5 = 5f64.sqrt();
        assert!((pca.component(0)[0] - 1.0 / s5).abs() < 1e-12);
        assert!((pca.component(0)[1] - 2.0 / s5).abs() < 1e-12);
        assert!((pca.explained_variance[0] - total_variance(&x)).abs() < 1e-9);
    }

    #[test]
    fn pca_axis_aligned() {
        let rows = vec![vec![0.0, -2.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]];
        let x = EmbeddingMatrix::from_rows(&rows).unwrap();
        let pca = pca_fit(&x, 1).unwrap();
        assert!(pca.mean.iter().all(|m| m.abs() < 1e-12));
        assert!((pca.component(0)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_transform_of_mean_is_zero_and_checks_dims() {
        let x = random_matrix(20, 5, 3);
        let pca = pca_fit(&x, 3).unwrap();
        let mean = EmbeddingMatrix::new(1, 5, pca.mean.clone()).unwrap();
        assert!(pca.transform(&mean).unwrap().as_slice().iter().all(|v| v.abs() < 1e-12));
        assert!(pca.transform(&random_matrix(2, 4, 0)).is_err());
        assert!(pca_fit(&x, 0).is_err());
        assert!(pca_fit(&x, 6).is_err());
        assert!(pca_fit(&random_matrix(3, 5, 1), 3).is_err());
    }

    #[test]
    fn nations_sized_reduction() {
        let x = random_matrix(14, 64, 9);
        let pca = pca_fit(&x, 2).unwrap();
        let reduced = pca.transform(&x).unwrap();
        assert_eq!((reduced.rows(), reduced.cols()), (14, 2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pca_invariants(rows in 3usize..15, cols in 1usize..7, seed in any::<u64>()) {
            let x = random_matrix(rows, cols, seed);
            let z = (rows - 1).min(cols);
            let pca = pca_fit(&x, z).unwrap();
            for i in 0..z {
                for j in 0..z {
                    let d = dot(pca.component(i), pca.component(j));
                    let expected = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((d - expected).abs() < 1e-6);
                }
            }
            for w in pca.explained_variance.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            let total = total_variance(&x);
            let explained: f64 = pca.explained_variance.iter().sum();
            prop_assert!(explained <= total + 1e-9);
            if z == cols {
                prop_assert!((explained - total).abs() < 1e-6);
                let back = pca.inverse_transform(&pca.transform(&x).unwrap()).unwrap();
                for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}
