//! Training orchestration: config, preprocessing (embeddings, PCA, K-means),
//! the batch loop, periodic validation, checkpoints and the run log.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit_seeded, KMeansParams};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport};
use crate::kg_data::{build_true_index, load_entity_texts, EntityTextTable, Triple, TripleStore, TrueTripleIndex};
use crate::kge_models::{apply_update, loss_and_grads, AdamConfig, AdamState, KgeModel, LossMode, ModelKind, Norm};
use crate::rng::{stream_rng, Stream};
use crate::sampling::{NegSamplerConfig, NegativeSampler, Neighborhood, Strategy};
use crate::text_embedding::{fallback_embed, ingest_embedding_file, pca_fit, EmbeddingMatrix};

pub const LOG_FILE: &str = "train_log.jsonl";

fn default_temperature() -> f64 {
    1.0
}
fn default_kmeans_max_iter() -> usize {
    1000
}
fn default_kmeans_tol() -> f64 {
    1e-6
}
fn default_fallback_dim() -> usize {
    64
}

/// Flat run configuration, read from and written to JSON as-is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub run_name: Option<String>,
    pub model: ModelKind,
    pub dim: usize,
    pub gamma: f64,
    pub lr: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub loss_mode: LossMode,
    #[serde(default)]
    pub norm: Norm,
    pub batch_size: usize,
    pub num_negatives: usize,
    pub strategy: Strategy,
    #[serde(default)]
    pub clusters: Option<usize>,
    #[serde(default)]
    pub hops: Option<usize>,
    #[serde(default)]
    pub reduced_dim: Option<usize>,
    #[serde(default)]
    pub d_max: Option<f64>,
    #[serde(default)]
    pub filter_true: bool,
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub epochs: Option<u64>,
    /// Validate every this many steps; 0 disables periodic validation.
    #[serde(default)]
    pub eval_every: u64,
    /// Stop once this many steps pass without a better validation MRR.
    #[serde(default)]
    pub early_stopping_patience: Option<u64>,
    /// Divide the learning rate by 10 at this step, then again each time the
    /// step count triples. Constant learning rate when unset.
    #[serde(default)]
    pub warm_up_steps: Option<u64>,
    #[serde(default = "default_kmeans_max_iter")]
    pub kmeans_max_iter: usize,
    #[serde(default = "default_kmeans_tol")]
    pub kmeans_tol: f64,
    /// Width of the hashing embedder used when no embedding file is given.
    #[serde(default = "default_fallback_dim")]
    pub fallback_dim: usize,
    pub seed: u64,
    pub train_path: PathBuf,
    pub valid_path: PathBuf,
    pub test_path: PathBuf,
    #[serde(default)]
    pub entity_text_path: Option<PathBuf>,
    #[serde(default)]
    pub embedding_path: Option<PathBuf>,
    #[serde(default)]
    pub embedding_labels_path: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train_path);
        fix(&mut self.valid_path);
        fix(&mut self.test_path);
        for p in [
            &mut self.entity_text_path,
            &mut self.embedding_path,
            &mut self.embedding_labels_path,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn run_name(&self) -> String {
        self.run_name
            .clone()
            .unwrap_or_else(|| format!("{}-{}", self.model, self.strategy))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.num_negatives == 0 {
            return bad("num_negatives must be >= 1".into());
        }
        match (self.max_steps, self.epochs) {
            (Some(0), _) | (_, Some(0)) => return bad("max_steps/epochs must be >= 1".into()),
            (Some(_), Some(_)) | (None, None) => return bad("set exactly one of max_steps or epochs".into()),
            _ => {}
        }
        if self.embedding_path.is_some() != self.embedding_labels_path.is_some() {
            return bad("embedding_path and embedding_labels_path go together".into());
        }
        if self.warm_up_steps == Some(0) {
            return bad("warm_up_steps must be >= 1".into());
        }
        if self.fallback_dim < 2 {
            return bad("fallback_dim must be >= 2".into());
        }
        if self.strategy == Strategy::Lemon {
            let (Some(k), Some(h), Some(z)) = (self.clusters, self.hops, self.reduced_dim) else {
                return bad("lemon sampling needs clusters, hops and reduced_dim".into());
            };
            if k == 0 || z == 0 {
                return bad("clusters and reduced_dim must be >= 1".into());
            }
            if h == 0 || h > k {
                return bad(format!("hops must be in 1..={k}, got {h}"));
            }
            if self.kmeans_max_iter == 0 || !(self.kmeans_tol >= 0.0) {
                return bad("kmeans_max_iter must be >= 1 and kmeans_tol >= 0".into());
            }
        }
        if let Some(d) = self.d_max {
            if !(d >= 0.0) {
                return bad(format!("d_max must be >= 0, got {d}"));
            }
        }
        Ok(())
    }

    pub fn sampler_config(&self) -> NegSamplerConfig {
        NegSamplerConfig {
            strategy: self.strategy,
            num_negatives: self.num_negatives,
            hops: self.hops.unwrap_or(0),
            d_max: self.d_max,
            filter_true: self.filter_true,
            seed: self.seed,
        }
    }

    pub fn load_store(&self) -> Result<TripleStore> {
        TripleStore::load(&self.train_path, &self.valid_path, &self.test_path)
    }
}

/// Wall-clock cost of each preprocessing phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PreprocessTimings {
    pub embedding: Duration,
    pub reduction: Duration,
    pub clustering: Duration,
}

impl PreprocessTimings {
    pub fn total(&self) -> Duration {
        self.embedding + self.reduction + self.clustering
    }

    /// One line per phase, in minutes.
    pub fn render(&self) -> String {
        let min = |d: Duration| d.as_secs_f64() / 60.0;
        format!(
            "Embedding Generation: {:.4} minutes\nDimensionality Reduction: {:.4} minutes\nCluster Formation: {:.4} minutes\nTotal Time: {:.4} minutes\n",
            min(self.embedding),
            min(self.reduction),
            min(self.clustering),
            min(self.total())
        )
    }
}

/// Entity embeddings plus the time it took to obtain them.
#[derive(Debug, Clone)]
pub struct PreparedEmbeddings {
    pub matrix: EmbeddingMatrix,
    pub elapsed: Duration,
}

/// Ingests the configured embedding file, or falls back to hashed label texts.
pub fn prepare_embeddings(config: &TrainConfig, store: &TripleStore) -> Result<PreparedEmbeddings> {
    let start = Instant::now();
    let matrix = match (&config.embedding_path, &config.embedding_labels_path) {
        (Some(emb), Some(labels)) => ingest_embedding_file(emb, labels, &store.entities)?,
        _ => {
            let texts = match &config.entity_text_path {
                Some(path) => load_entity_texts(path, &store.entities)?,
                None => EntityTextTable::from_labels(&store.entities),
            };
            fallback_embed(&texts, config.fallback_dim, config.seed)?
        }
    };
    Ok(PreparedEmbeddings {
        matrix,
        elapsed: start.elapsed(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborhoodParams {
    pub clusters: usize,
    pub reduced_dim: usize,
    pub hops: usize,
    pub d_max: Option<f64>,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
}

/// PCA then K-means++ then the candidate cache. Returns the reduction and
/// clustering durations alongside.
pub fn build_neighborhood(
    embeddings: &EmbeddingMatrix,
    params: &NeighborhoodParams,
) -> Result<(Neighborhood, Duration, Duration)> {
    let start = Instant::now();
    let pca = pca_fit(embeddings, params.reduced_dim)?;
    let reduced = pca.transform(embeddings)?;
    let reduction = start.elapsed();

    let start = Instant::now();
    let kmeans = KMeansParams {
        k: params.clusters,
        max_iter: params.kmeans_max_iter,
        tol: params.kmeans_tol,
    };
    let model = kmeans_fit_seeded(&reduced, &kmeans, params.seed)?;
    let neighborhood = Neighborhood::new(model, reduced, params.hops, params.d_max)?;
    Ok((neighborhood, reduction, start.elapsed()))
}

/// Seeded shuffle, then contiguous chunks of `batch_size` (last one may be short).
pub fn make_batches<R: Rng + ?Sized>(train: &[Triple], batch_size: usize, rng: &mut R) -> Vec<Vec<Triple>> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let mut shuffled = train.to_vec();
    shuffled.shuffle(rng);
    shuffled.chunks(batch_size).map(<[Triple]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Run {
        run_name: String,
        model: ModelKind,
        strategy: Strategy,
        loss_mode: LossMode,
        seed: u64,
        num_entities: usize,
        num_relations: usize,
        num_train: usize,
    },
    Preprocess {
        phase: String,
        minutes: f64,
    },
    Step {
        step: u64,
        loss: f64,
    },
    Eval {
        step: u64,
        split: String,
        metrics: MetricsReport,
    },
    Final {
        step: u64,
        split: String,
        metrics: MetricsReport,
        train_minutes: f64,
    },
}

pub const PHASE_EMBEDDING: &str = "Embedding Generation";
pub const PHASE_REDUCTION: &str = "Dimensionality Reduction";
pub const PHASE_CLUSTERING: &str = "Cluster Formation";
pub const PHASE_TOTAL: &str = "Total Time";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub timings: Option<PreprocessTimings>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn final_metrics(&self) -> Option<&MetricsReport> {
        self.records.iter().rev().find_map(|r| match r {
            LogRecord::Final { metrics, .. } => Some(metrics),
            _ => None,
        })
    }

    pub fn run_name(&self) -> Option<&str> {
        self.records.iter().find_map(|r| match r {
            LogRecord::Run { run_name, .. } => Some(run_name.as_str()),
            _ => None,
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for record in &self.records {
            serde_json::to_writer(&mut w, record)?;
            w.write_all(b"\n").map_err(|e| Error::io("<log>", e))?;
        }
        w.flush().map_err(|e| Error::io("<log>", e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
                source_name: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            log.records.push(record);
        }
        Ok(log)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: KgeModel,
    pub log: TrainLog,
    /// Model with the best validation MRR, when periodic validation ran.
    pub best: Option<KgeModel>,
}

fn save_checkpoint(config: &TrainConfig, name: &str, model: &KgeModel) -> Result<()> {
    if let Some(dir) = &config.output_dir {
        model.save(dir.join(name))?;
    }
    Ok(())
}

/// Trains one model. `embeddings` is required for cluster-guided sampling.
///
/// Clustering runs once, before the first step.
pub fn train(
    config: &TrainConfig,
    store: &TripleStore,
    embeddings: Option<&PreparedEmbeddings>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if store.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut log = TrainLog::default();
    log.records.push(LogRecord::Run {
        run_name: config.run_name(),
        model: config.model,
        strategy: config.strategy,
        loss_mode: config.loss_mode,
        seed: config.seed,
        num_entities: store.num_entities(),
        num_relations: store.num_relations(),
        num_train: store.train.len(),
    });

    let sampler_config = config.sampler_config();
    let sampler = match config.strategy {
        Strategy::Uniform => NegativeSampler::uniform(sampler_config, store.num_entities())?,
        Strategy::Lemon => {
            let emb = embeddings.ok_or_else(|| Error::Config("lemon sampling needs entity embeddings".into()))?;
            if emb.matrix.rows() != store.num_entities() {
                return Err(Error::Shape(format!(
                    "{} embedding rows for {} entities",
                    emb.matrix.rows(),
                    store.num_entities()
                )));
            }
            let params = NeighborhoodParams {
                clusters: config.clusters.unwrap_or_default(),
                reduced_dim: config.reduced_dim.unwrap_or_default(),
                hops: config.hops.unwrap_or_default(),
                d_max: config.d_max,
                kmeans_max_iter: config.kmeans_max_iter,
                kmeans_tol: config.kmeans_tol,
                seed: config.seed,
            };
            let (neighborhood, reduction, clustering) = build_neighborhood(&emb.matrix, &params)?;
            let timings = PreprocessTimings {
                embedding: emb.elapsed,
                reduction,
                clustering,
            };
            for (phase, d) in [
                (PHASE_EMBEDDING, timings.embedding),
                (PHASE_REDUCTION, timings.reduction),
                (PHASE_CLUSTERING, timings.clustering),
                (PHASE_TOTAL, timings.total()),
            ] {
                log.records.push(LogRecord::Preprocess {
                    phase: phase.to_owned(),
                    minutes: d.as_secs_f64() / 60.0,
                });
            }
            log.timings = Some(timings);
            NegativeSampler::lemon(sampler_config, neighborhood)?
        }
    };
    let sampler = if config.filter_true {
        sampler.with_filter(TrueTripleIndex::from_triples(&store.train))
    } else {
        sampler
    };

    let mut model = KgeModel::init(
        config.model,
        store.num_entities(),
        store.num_relations(),
        config.dim,
        config.gamma,
        config.seed,
    )?
    .with_norm(config.norm);
    let mut adam = AdamState::new(&model, AdamConfig::default());
    let mut batch_rng = stream_rng(config.seed, Stream::Batching);
    let mut sample_rng = stream_rng(config.seed, Stream::Sampling);

    let steps_per_epoch = store.train.len().div_ceil(config.batch_size) as u64;
    let max_steps = config
        .max_steps
        .unwrap_or_else(|| config.epochs.unwrap_or(1) * steps_per_epoch);
    let eval_index = (config.eval_every > 0).then(|| build_true_index(store));

    let started = Instant::now();
    let mut step = 0u64;
    let mut best: Option<(u64, f64, KgeModel)> = None;
    let mut lr = config.lr;
    let mut next_decay = config.warm_up_steps;

    'outer: while step < max_steps {
        for batch in make_batches(&store.train, config.batch_size, &mut batch_rng) {
            let negatives = sampler.sample(&batch, &mut sample_rng);
            let (loss, grads) = match loss_and_grads(&model, &batch, &negatives, config.loss_mode, config.temperature) {
                Ok(v) => v,
                Err(e) => {
                    save_checkpoint(config, "aborted", &model)?;
                    return Err(e);
                }
            };
            apply_update(&mut model, &grads, &mut adam, lr);
            step += 1;
            if next_decay == Some(step) {
                lr /= 10.0;
                next_decay = Some(step * 3);
                log::info!("step {step}: learning rate now {lr}");
            }
            log.records.push(LogRecord::Step { step, loss });

            if let Some(index) = &eval_index {
                if step.is_multiple_of(config.eval_every) {
                    let metrics = evaluate(&model, &store.valid, index);
                    log.records.push(LogRecord::Eval {
                        step,
                        split: "valid".into(),
                        metrics,
                    });
                    save_checkpoint(config, "checkpoint", &model)?;
                    let mrr = metrics.filtered.mrr;
                    if best.as_ref().is_none_or(|(_, b, _)| mrr > *b) {
                        save_checkpoint(config, "best", &model)?;
                        best = Some((step, mrr, model.clone()));
                    } else if let (Some(p), Some((at, _, _))) = (config.early_stopping_patience, &best) {
                        if step - at >= p {
                            log::info!("early stopping at step {step}");
                            break 'outer;
                        }
                    }
                }
            }
            if step >= max_steps {
                break;
            }
        }
    }

    let index = eval_index.unwrap_or_else(|| build_true_index(store));
    let metrics = evaluate(&model, &store.test, &index);
    log.records.push(LogRecord::Final {
        step,
        split: "test".into(),
        metrics,
        train_minutes: started.elapsed().as_secs_f64() / 60.0,
    });

    if let Some(dir) = &config.output_dir {
        save_checkpoint(config, "final", &model)?;
        log.save(dir.join(LOG_FILE))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        best: best.map(|(_, _, m)| m),
    })
}

/// Loads data and embeddings named by the config, then trains.
pub fn run(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let store = config.load_store()?;
    let embeddings = match config.strategy {
        Strategy::Lemon => Some(prepare_embeddings(config, &store)?),
        Strategy::Uniform => None,
    };
    train(config, &store, embeddings.as_ref())
}
