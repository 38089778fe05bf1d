//! Knowledge-graph embedding with cluster-guided negative sampling.
//!
//! Entity texts are embedded, reduced with PCA and grouped by K-means; each
//! entity then draws negatives from its nearest clusters instead of the whole
//! vocabulary. TransE, DistMult and RotatE are trained with sparse Adam and
//! evaluated with raw and filtered ranking.

// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod error;
pub mod evaluation;
pub mod kg_data;
pub mod kge_models;
pub mod lemb;
pub mod rng;
pub mod sampling;
pub mod text_embedding;
pub mod trainer;

pub use error::{Error, Result};
pub use kg_data::{Triple, TripleStore, TrueTripleIndex, Vocab};
pub use kge_models::{KgeModel, LossMode, ModelKind, Norm};
pub use sampling::{NegativeSampler, Side, Strategy};
pub use trainer::{TrainConfig, TrainLog, TrainOutcome};
