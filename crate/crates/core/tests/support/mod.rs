//! Oracles and property checks shared by the integration tests and the
//! acceptance runner. Every check returns `Ok(summary)` or `Err(reason)`.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use lemon_kge::clustering::{kmeans_fit_seeded, ClusterModel, KMeansParams};
use lemon_kge::evaluation::{rank_query, Scorer};
use lemon_kge::kg_data::{Triple, TripleStore, TrueTripleIndex, Vocab};
use lemon_kge::kge_models::{loss_and_grads, KgeModel, LossMode, ModelKind, Norm};
use lemon_kge::sampling::{
    lemon_sample_batch, self_adv_weights, Corruption, NegSamplerConfig, NegativeBatch, Neighborhood, Side, Strategy,
};
use lemon_kge::text_embedding::{pca_fit, EmbeddingMatrix};
use lemon_kge::trainer::{prepare_embeddings, train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn data_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> EmbeddingMatrix {
    let data = (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect();
    EmbeddingMatrix::new(rows, cols, data).unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

// ---------------------------------------------------------------- gradients

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Loss recomputed from scores alone, with the negative weights supplied.
fn oracle_loss(model: &KgeModel, positives: &[Triple], negatives: &[Vec<Triple>], weights: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for ((pos, negs), w) in positives.iter().zip(negatives).zip(weights) {
        total += softplus(-model.score(pos));
        for (t, wi) in negs.iter().zip(w) {
            total += wi * softplus(model.score(t));
        }
    }
    total / positives.len() as f64
}

fn oracle_weights(model: &KgeModel, negatives: &[Vec<Triple>], mode: LossMode, temperature: f64) -> Vec<Vec<f64>> {
    negatives
        .iter()
        .map(|negs| match mode {
            LossMode::Plain => vec![1.0 / negs.len() as f64; negs.len()],
            LossMode::SelfAdversarial => {
                let z: Vec<f64> = negs.iter().map(|t| (temperature * model.score(t)).exp()).collect();
                let s: f64 = z.iter().sum();
                z.iter().map(|v| v / s).collect()
            }
        })
        .collect()
}

/// Largest relative error between analytic and central-difference gradients.
pub fn gradient_check(kind: ModelKind, norm: Norm, mode: LossMode, seed: u64) -> Result<f64, String> {
    const EPS: f64 = 1e-4;
    let mut model = KgeModel::init(kind, 7, 3, 5, 3.0, seed)
        .map_err(|e| e.to_string())?
        .with_norm(norm);
    let positives = vec![Triple::new(0, 0, 1), Triple::new(2, 1, 3), Triple::new(4, 2, 5)];
    let batch = NegativeBatch {
        corruptions: vec![
            Corruption {
                side: Side::Tail,
                entities: vec![2, 3, 6],
            },
            Corruption {
                side: Side::Head,
                entities: vec![0, 5, 6],
            },
            Corruption {
                side: Side::Tail,
                entities: vec![1, 1, 0],
            },
        ],
        fallbacks: 0,
    };
    let neg_triples: Vec<Vec<Triple>> = positives
        .iter()
        .zip(&batch.corruptions)
        .map(|(p, c)| c.entities.iter().map(|&e| c.side.replace(p, e)).collect())
        .collect();
    let temperature = 0.7;
    let (loss, grads) = loss_and_grads(&model, &positives, &batch, mode, temperature).map_err(|e| e.to_string())?;
    let weights = oracle_weights(&model, &neg_triples, mode, temperature);
    let base = oracle_loss(&model, &positives, &neg_triples, &weights);
    if (loss - base).abs() > 1e-10 * base.abs().max(1.0) {
        return Err(format!("loss {loss} vs oracle {base}"));
    }

    let mut worst = 0.0f64;
    let mut compare = |analytic: f64, numeric: f64, what: String| -> Result<(), String> {
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < 1e-7 {
            0.0
        } else {
            (analytic - numeric).abs() / scale
        };
        worst = worst.max(err);
        if err > 1e-4 {
            return Err(format!("{what}: analytic {analytic:e} vs numeric {numeric:e}"));
        }
        Ok(())
    };

    for e in 0..model.num_entities() as u32 {
        for j in 0..model.entity_width() {
            let orig = model.entity_row(e)[j];
            model.entity_row_mut(e)[j] = orig + EPS;
            let up = oracle_loss(&model, &positives, &neg_triples, &weights);
            model.entity_row_mut(e)[j] = orig - EPS;
            let down = oracle_loss(&model, &positives, &neg_triples, &weights);
            model.entity_row_mut(e)[j] = orig;
            let analytic = grads.entity.get(&e).map_or(0.0, |g| g[j]);
            compare(analytic, (up - down) / (2.0 * EPS), format!("entity {e}[{j}]"))?;
        }
    }
    for r in 0..model.num_relations() as u32 {
        for j in 0..model.relation_width() {
            let orig = model.relation_row(r)[j];
            model.relation_row_mut(r)[j] = orig + EPS;
            let up = oracle_loss(&model, &positives, &neg_triples, &weights);
            model.relation_row_mut(r)[j] = orig - EPS;
            let down = oracle_loss(&model, &positives, &neg_triples, &weights);
            model.relation_row_mut(r)[j] = orig;
            let analytic = grads.relation.get(&r).map_or(0.0, |g| g[j]);
            compare(analytic, (up - down) / (2.0 * EPS), format!("relation {r}[{j}]"))?;
        }
    }
    Ok(worst)
}

pub fn all_gradient_checks() -> Check {
    let mut worst = 0.0f64;
    for kind in [ModelKind::TransE, ModelKind::DistMult, ModelKind::RotatE] {
        for mode in [LossMode::Plain, LossMode::SelfAdversarial] {
            for norm in [Norm::L1, Norm::L2] {
                if kind == ModelKind::DistMult && norm == Norm::L2 {
                    continue;
                }
                for seed in 0..3 {
                    let err = gradient_check(kind, norm, mode, seed)
                        .map_err(|e| format!("{kind} {norm:?} {mode:?} seed {seed}: {e}"))?;
                    worst = worst.max(err);
                }
            }
        }
    }
    Ok(format!("max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- k-means

fn recomputed_inertia(x: &EmbeddingMatrix, model: &ClusterModel) -> f64 {
    (0..x.rows())
        .map(|i| sq_dist(x.row(i), model.centroid(model.assignment()[i] as usize)))
        .sum()
}

pub fn check_partition(model: &ClusterModel, n: usize) -> Result<(), String> {
    if model.assignment().len() != n {
        return Err(format!("{} assignments for {n} points", model.assignment().len()));
    }
    let mut seen = vec![0usize; n];
    for c in 0..model.k() {
        let members = model.members(c);
        if members.is_empty() {
            return Err(format!("cluster {c} is empty"));
        }
        for &e in members {
            seen[e as usize] += 1;
            if model.assignment()[e as usize] as usize != c {
                return Err(format!("entity {e} listed in {c} but assigned elsewhere"));
            }
        }
    }
    if let Some(e) = seen.iter().position(|&s| s != 1) {
        return Err(format!("entity {e} appears in {} member lists", seen[e]));
    }
    Ok(())
}

pub fn kmeans_invariants(instances: usize) -> Check {
    let mut r = rng(11);
    let mut iterations = 0;
    for trial in 0..instances {
        let n = r.random_range(2..60);
        let d = r.random_range(1..5);
        let k = r.random_range(1..=n.min(9));
        let mut x = random_matrix(&mut r, n, d, 5.0);
        if trial % 4 == 0 {
            // Duplicate rows stress the seeding and empty-cluster repair.
            let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i % 3.min(n)).to_vec()).collect();
            x = EmbeddingMatrix::from_rows(&rows).unwrap();
        }
        let model = kmeans_fit_seeded(&x, &KMeansParams::new(k), trial as u64).map_err(|e| e.to_string())?;
        check_partition(&model, n).map_err(|e| format!("instance {trial}: {e}"))?;
        for w in model.inertia_history.windows(2) {
            if w[1] > w[0] + 1e-9 * w[0].abs().max(1.0) {
                return Err(format!("instance {trial}: inertia rose {} -> {}", w[0], w[1]));
            }
        }
        let sse = recomputed_inertia(&x, &model);
        if (sse - model.inertia).abs() > 1e-9 * sse.max(1.0) {
            return Err(format!(
                "instance {trial}: inertia {} vs recomputed {sse}",
                model.inertia
            ));
        }
        iterations += model.iterations_run;
    }
    Ok(format!("{instances} instances, {iterations} Lloyd iterations"))
}

// ---------------------------------------------------------------- pca

pub fn pca_invariants(instances: usize) -> Check {
    let mut r = rng(23);
    let mut worst_orth = 0.0f64;
    let mut worst_rec = 0.0f64;
    for trial in 0..instances {
        let n = r.random_range(3..30);
        let d = r.random_range(1..9);
        let z = d.min(n - 1);
        let x = random_matrix(&mut r, n, d, 3.0);
        let model = pca_fit(&x, z).map_err(|e| format!("instance {trial}: {e}"))?;
        for a in 0..z {
            for b in 0..z {
                let dot: f64 = model
                    .component(a)
                    .iter()
                    .zip(model.component(b))
                    .map(|(p, q)| p * q)
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst_orth = worst_orth.max((dot - want).abs());
            }
        }
        let back = model.inverse_transform(&model.transform(&x).unwrap()).unwrap();
        let err = x
            .as_slice()
            .iter()
            .zip(back.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_rec = worst_rec.max(err);
    }
    if worst_orth > 1e-6 || worst_rec > 1e-6 {
        return Err(format!(
            "orthonormality {worst_orth:.2e}, reconstruction {worst_rec:.2e}"
        ));
    }
    Ok(format!(
        "{instances} instances, orthonormality {worst_orth:.2e}, reconstruction {worst_rec:.2e}"
    ))
}

// ---------------------------------------------------------------- ranking

/// Scores drawn from a small integer range, so ties are common.
pub struct TieScorer {
    pub n: usize,
    pub table: Vec<f64>,
    pub relations: usize,
}

impl Scorer for TieScorer {
    fn num_entities(&self) -> usize {
        self.n
    }

    fn score(&self, t: &Triple) -> f64 {
        self.table[(t.head as usize * self.relations + t.relation as usize) * self.n + t.tail as usize]
    }
}

/// Rank by sorting: the truth sits at the average of the 1-based positions
/// occupied by its score in the descending sort of the kept candidates.
fn sort_rank(scores: &[(u32, f64)], truth: u32) -> f64 {
    let target = scores.iter().find(|(e, _)| *e == truth).unwrap().1;
    let mut sorted: Vec<f64> = scores.iter().map(|(_, s)| *s).collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let positions: Vec<usize> = sorted
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == target)
        .map(|(i, _)| i + 1)
        .collect();
    positions.iter().sum::<usize>() as f64 / positions.len() as f64
}

fn check_ranks<S: Scorer>(model: &S, triples: &[Triple], index: &TrueTripleIndex) -> Result<(), String> {
    let n = model.num_entities() as u32;
    for t in triples {
        for side in [Side::Head, Side::Tail] {
            let truth = side.entity(t);
            let all: Vec<(u32, f64)> = (0..n).map(|e| (e, model.score(&side.replace(t, e)))).collect();
            let kept: Vec<(u32, f64)> = all
                .iter()
                .copied()
                .filter(|(e, _)| *e == truth || !index.contains(&side.replace(t, *e)))
                .collect();
            let got = rank_query(model, t, side, index);
            let (raw, filtered) = (sort_rank(&all, truth), sort_rank(&kept, truth));
            if got.raw_rank != raw || got.filtered_rank != filtered {
                return Err(format!(
                    "{t:?} {side:?}: got ({}, {}), oracle ({raw}, {filtered})",
                    got.raw_rank, got.filtered_rank
                ));
            }
        }
    }
    Ok(())
}

pub fn rank_oracle(models: usize) -> Check {
    let mut r = rng(31);
    let mut queries = 0;
    for m in 0..models {
        let n = r.random_range(2..15usize);
        let nr = r.random_range(1..4usize);
        let triples: Vec<Triple> = (0..r.random_range(1..12))
            .map(|_| {
                Triple::new(
                    r.random_range(0..n as u32),
                    r.random_range(0..nr as u32),
                    r.random_range(0..n as u32),
                )
            })
            .collect();
        let index = TrueTripleIndex::from_triples(&triples);
        queries += 2 * triples.len();
        if m % 2 == 0 {
            let table = (0..n * nr * n).map(|_| r.random_range(0..4) as f64).collect();
            check_ranks(
                &TieScorer {
                    n,
                    table,
                    relations: nr,
                },
                &triples,
                &index,
            )
        } else {
            let kind = [ModelKind::TransE, ModelKind::DistMult, ModelKind::RotatE][m % 3];
            let model = KgeModel::init(kind, n, nr, r.random_range(1..5), 2.0, m as u64).unwrap();
            check_ranks(&model, &triples, &index)
        }
        .map_err(|e| format!("model {m}: {e}"))?;
    }
    Ok(format!("{models} models, {queries} queries"))
}

// ---------------------------------------------------------------- sampling

pub fn self_adv_properties() -> Check {
    let mut r = rng(41);
    let mut worst_sum = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(1..64);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-30.0..30.0)).collect();
        let tau = r.random_range(0.01..3.0);
        let w = self_adv_weights(&scores, tau).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err("negative weight".into());
        }
    }
    if worst_sum > 1e-9 {
        return Err(format!("weights sum off by {worst_sum:e}"));
    }
    let scores: Vec<f64> = (0..10).map(|i| i as f64 * 1.7 - 4.0).collect();
    let w = self_adv_weights(&scores, 1e-6).map_err(|e| e.to_string())?;
    let spread = w.iter().map(|v| (v - 0.1).abs()).fold(0.0, f64::max);
    if spread > 1e-4 {
        return Err(format!("tau -> 0 weights deviate from uniform by {spread:e}"));
    }
    Ok(format!("sum error {worst_sum:.1e}, tau=1e-6 deviation {spread:.1e}"))
}

/// Candidate union recomputed from raw centroid distances.
fn oracle_union(model: &ClusterModel, reduced: &EmbeddingMatrix, target: u32, hops: usize) -> BTreeSet<u32> {
    let point = reduced.row(target as usize);
    let mut order: Vec<(f64, usize)> = (0..model.k())
        .map(|c| (sq_dist(point, model.centroid(c)).sqrt(), c))
        .collect();
    order.sort_by(|a, b| a.partial_cmp(b).unwrap());
    order
        .iter()
        .take(hops)
        .flat_map(|&(_, c)| model.members(c).iter().copied())
        .filter(|&e| e != target)
        .collect()
}

pub fn lemon_membership(instances: usize) -> Check {
    let mut r = rng(53);
    let mut draws = 0usize;
    let mut fallbacks = 0usize;
    for trial in 0..instances {
        let n = r.random_range(3..40usize);
        let k = r.random_range(1..=n.min(6));
        let hops = r.random_range(1..=k);
        let reduced = random_matrix(&mut r, n, 2, 10.0);
        let model = kmeans_fit_seeded(&reduced, &KMeansParams::new(k), trial as u64).unwrap();
        let neighborhood = Neighborhood::new(model.clone(), reduced.clone(), hops, None).unwrap();
        let config = NegSamplerConfig {
            strategy: Strategy::Lemon,
            num_negatives: 8,
            hops,
            d_max: None,
            filter_true: false,
            seed: 0,
        };
        let batch: Vec<Triple> = (0..16)
            .map(|_| Triple::new(r.random_range(0..n as u32), 0, r.random_range(0..n as u32)))
            .collect();
        let negatives = lemon_sample_batch(&batch, &config, &neighborhood, None, &mut r);
        let mut fell_back = 0;
        for (pos, c) in batch.iter().zip(&negatives.corruptions) {
            let target = c.side.entity(pos);
            let union = oracle_union(&model, &reduced, target, hops);
            if union.is_empty() {
                fell_back += 1;
            }
            for &e in &c.entities {
                draws += 1;
                if e == target {
                    return Err(format!("instance {trial}: negative equals the original entity {e}"));
                }
                if !union.is_empty() && !union.contains(&e) {
                    return Err(format!(
                        "instance {trial}: {e} outside the {hops}-cluster union of {target}"
                    ));
                }
            }
        }
        if fell_back != negatives.fallbacks {
            return Err(format!(
                "instance {trial}: {} fallbacks reported, oracle expects {fell_back}",
                negatives.fallbacks
            ));
        }
        fallbacks += fell_back;
    }
    Ok(format!("{draws} negatives checked, {fallbacks} uniform fallbacks"))
}

// ---------------------------------------------------------------- training

/// Ring-shaped toy graph: `e_i -r_j-> e_{(i + j + 1) % n}`.
pub fn toy_store(n: usize, relations: usize) -> TripleStore {
    let entities = Vocab::from_labels((0..n).map(|i| format!("node_{i}"))).unwrap();
    let rel = Vocab::from_labels((0..relations).map(|j| format!("link_{j}"))).unwrap();
    let mut all = Vec::new();
    for i in 0..n {
        for j in 0..relations {
            all.push(Triple::new(i as u32, j as u32, ((i + j + 1) % n) as u32));
        }
    }
    let test = all.split_off(all.len() - 4);
    let valid = all.split_off(all.len() - 4);
    TripleStore {
        entities,
        relations: rel,
        train: all,
        valid,
        test,
    }
}

pub fn toy_config(strategy: Strategy, model: ModelKind, steps: u64) -> TrainConfig {
    TrainConfig {
        run_name: None,
        model,
        dim: 8,
        gamma: 4.0,
        lr: 0.05,
        temperature: 1.0,
        loss_mode: LossMode::Plain,
        norm: Norm::L1,
        batch_size: 8,
        num_negatives: 4,
        strategy,
        clusters: Some(3),
        hops: Some(2),
        reduced_dim: Some(2),
        d_max: None,
        filter_true: false,
        max_steps: Some(steps),
        epochs: None,
        eval_every: 20,
        early_stopping_patience: None,
        warm_up_steps: None,
        kmeans_max_iter: 1000,
        kmeans_tol: 1e-6,
        fallback_dim: 16,
        seed: 5,
        train_path: PathBuf::new(),
        valid_path: PathBuf::new(),
        test_path: PathBuf::new(),
        entity_text_path: None,
        embedding_path: None,
        embedding_labels_path: None,
        output_dir: None,
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|f| f != "train_log.jsonl") {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

/// Two identical runs per strategy and model must write identical files.
pub fn end_to_end_determinism() -> Check {
    let store = toy_store(24, 3);
    let mut compared = 0;
    for strategy in [Strategy::Uniform, Strategy::Lemon] {
        for kind in [ModelKind::TransE, ModelKind::RotatE, ModelKind::DistMult] {
            let mut outputs = Vec::new();
            let mut losses = Vec::new();
            for _ in 0..2 {
                let dir = tempfile::tempdir().unwrap();
                let mut config = toy_config(strategy, kind, 60);
                config.output_dir = Some(dir.path().to_path_buf());
                let emb = prepare_embeddings(&config, &store).map_err(|e| e.to_string())?;
                let out = train(&config, &store, Some(&emb)).map_err(|e| e.to_string())?;
                losses.push(out.log.losses().iter().map(|l| l.to_bits()).collect::<Vec<_>>());
                outputs.push(dir_bytes(dir.path()));
            }
            if outputs[0] != outputs[1] {
                return Err(format!("{strategy}/{kind}: checkpoints differ between identical runs"));
            }
            if losses[0] != losses[1] {
                return Err(format!("{strategy}/{kind}: loss curves differ between identical runs"));
            }
            compared += outputs[0].len();
        }
    }
    Ok(format!(
        "{compared} checkpoint files bitwise equal across repeated runs"
    ))
}

pub fn distinct(values: &[u32]) -> usize {
    values.iter().collect::<HashSet<_>>().len()
}
