//! Negative sampling: uniform corruption, cluster-guided corruption, and
//! self-adversarial weights.
//!
//! Cluster-guided corruption replaces the head or tail of a positive triple
//! with entities drawn from the `hops` clusters whose centroids lie nearest
//! to the corrupted entity's reduced text embedding. Candidate sets depend
//! only on the (fixed) clustering, so they are computed once up front.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterModel, DistanceVector};
use crate::error::{Error, Result};
use crate::kg_data::{EntityId, Triple, TrueTripleIndex};
use crate::text_embedding::EmbeddingMatrix;

/// Redraws allowed per negative when rejecting known true triples.
pub const FILTER_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Head,
    Tail,
}

impl Side {
    pub fn entity(self, triple: &Triple) -> EntityId {
        match self {
            Side::Head => triple.head,
            Side::Tail => triple.tail,
        }
    }

    pub fn replace(self, triple: &Triple, entity: EntityId) -> Triple {
        match self {
            Side::Head => Triple {
                head: entity,
                ..*triple
            },
            Side::Tail => Triple {
                tail: entity,
                ..*triple
            },
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Head => "head",
            Side::Tail => "tail",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uniform,
    Lemon,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Uniform => "uniform",
            Strategy::Lemon => "lemon",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "lemon" => Ok(Strategy::Lemon),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampling strategy `{other}` (expected uniform or lemon)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegSamplerConfig {
    pub strategy: Strategy,
    pub num_negatives: usize,
    /// Number of nearest clusters whose members are eligible.
    pub hops: usize,
    /// Optional extra cutoff: only clusters whose centroid is within this distance.
    pub d_max: Option<f64>,
    pub filter_true: bool,
    pub seed: u64,
}

impl NegSamplerConfig {
    /// `clusters` is the K of the neighborhood, when one exists.
    pub fn validate(&self, clusters: Option<usize>) -> Result<()> {
        if self.num_negatives == 0 {
            return Err(Error::Config("num_negatives must be >= 1".to_owned()));
        }
        if self.strategy == Strategy::Lemon {
            if self.hops == 0 {
                return Err(Error::Config("hops must be >= 1 for lemon sampling".to_owned()));
            }
            if let Some(k) = clusters {
                if self.hops > k {
                    return Err(Error::Config(format!(
                        "hops ({}) cannot exceed clusters ({k})",
                        self.hops
                    )));
                }
            }
            if let Some(d) = self.d_max {
                if !(d >= 0.0) {
                    return Err(Error::Config(format!("d_max must be >= 0, got {d}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    pub side: Side,
    pub entities: Vec<EntityId>,
}

/// Negatives for a batch of positives, index-aligned with the positives.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NegativeBatch {
    pub corruptions: Vec<Corruption>,
    /// Positives whose candidate set was empty and fell back to uniform draws.
    pub fallbacks: usize,
}

impl NegativeBatch {
    pub fn len(&self) -> usize {
        self.corruptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corruptions.is_empty()
    }

    /// The corrupted triples for positive `i`.
    pub fn triples<'a>(&'a self, i: usize, positive: &'a Triple) -> impl Iterator<Item = Triple> + 'a {
        let c = &self.corruptions[i];
        c.entities.iter().map(move |&e| c.side.replace(positive, e))
    }
}

/// Head with probability `head_prob`, else tail.
pub fn choose_corrupt_position<R: Rng + ?Sized>(rng: &mut R, head_prob: f64) -> Side {
    if rng.random_bool(head_prob) {
        Side::Head
    } else {
        Side::Tail
    }
}

/// Members of the `hops` clusters nearest to `entity`, minus the entity itself,
/// sorted by id. `None` when nothing remains.
pub fn lemon_candidates(
    entity: EntityId,
    model: &ClusterModel,
    reduced: &EmbeddingMatrix,
    hops: usize,
    d_max: Option<f64>,
) -> Result<Option<Vec<EntityId>>> {
    if entity as usize >= reduced.rows() {
        return Err(Error::InvalidArgument(format!(
            "entity {entity} has no reduced embedding"
        )));
    }
    if hops == 0 || hops > model.k() {
        return Err(Error::InvalidArgument(format!(
            "hops must be in 1..={}, got {hops}",
            model.k()
        )));
    }
    let distances = model.centroid_distances(reduced.row(entity as usize))?;
    Ok(candidates_from_distances(entity, model, &distances, hops, d_max))
}

/// Clusters whose members are eligible, in ascending id order.
fn eligible_clusters(distances: &DistanceVector, hops: usize, d_max: Option<f64>) -> Vec<usize> {
    let mut chosen: Vec<usize> = distances
        .sorted_clusters()
        .into_iter()
        .take(hops)
        .filter(|&c| d_max.is_none_or(|d| distances.0[c] <= d))
        .collect();
    chosen.sort_unstable();
    chosen
}

fn pool_of(model: &ClusterModel, clusters: &[usize]) -> Vec<EntityId> {
    let mut out: Vec<EntityId> = clusters
        .iter()
        .flat_map(|&c| model.members(c).iter().copied())
        .collect();
    out.sort_unstable();
    out
}

fn candidates_from_distances(
    entity: EntityId,
    model: &ClusterModel,
    distances: &DistanceVector,
    hops: usize,
    d_max: Option<f64>,
) -> Option<Vec<EntityId>> {
    let mut out = pool_of(model, &eligible_clusters(distances, hops, d_max));
    out.retain(|&e| e != entity);
    (!out.is_empty()).then_some(out)
}

/// Cluster model, reduced embeddings and the candidate cache.
///
/// Entities whose eligible clusters coincide share one sorted pool; the
/// entity itself is skipped at draw time.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    model: ClusterModel,
    reduced: EmbeddingMatrix,
    hops: usize,
    d_max: Option<f64>,
    pools: Vec<Vec<EntityId>>,
    pool_index: Vec<u32>,
}

impl Neighborhood {
    pub fn new(model: ClusterModel, reduced: EmbeddingMatrix, hops: usize, d_max: Option<f64>) -> Result<Self> {
        if reduced.rows() != model.num_entities() || reduced.cols() != model.dim() {
            return Err(Error::Shape(format!(
                "reduced embeddings are {}x{}, cluster model expects {}x{}",
                reduced.rows(),
                reduced.cols(),
                model.num_entities(),
                model.dim()
            )));
        }
        if hops == 0 || hops > model.k() {
            return Err(Error::InvalidArgument(format!(
                "hops must be in 1..={}, got {hops}",
                model.k()
            )));
        }
        let keys: Vec<Vec<usize>> = (0..reduced.rows())
            .into_par_iter()
            .map(|e| {
                let distances = model
                    .centroid_distances(reduced.row(e))
                    .expect("dimensions checked above");
                eligible_clusters(&distances, hops, d_max)
            })
            .collect();
        let mut seen: BTreeMap<&[usize], u32> = BTreeMap::new();
        let mut pools = Vec::new();
        let pool_index = keys
            .iter()
            .map(|key| {
                *seen.entry(key.as_slice()).or_insert_with(|| {
                    pools.push(pool_of(&model, key));
                    (pools.len() - 1) as u32
                })
            })
            .collect();
        Ok(Self {
            model,
            reduced,
            hops,
            d_max,
            pools,
            pool_index,
        })
    }

    pub fn model(&self) -> &ClusterModel {
        &self.model
    }

    pub fn reduced(&self) -> &EmbeddingMatrix {
        &self.reduced
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn d_max(&self) -> Option<f64> {
        self.d_max
    }

    pub fn num_entities(&self) -> usize {
        self.pool_index.len()
    }

    /// Number of distinct candidate pools.
    pub fn num_pools(&self) -> usize {
        self.pools.len()
    }

    /// Sorted members of the entity's eligible clusters, itself included.
    pub fn pool(&self, entity: EntityId) -> &[EntityId] {
        &self.pools[self.pool_index[entity as usize] as usize]
    }

    /// The pool without the entity itself; `None` when that leaves nothing.
    pub fn candidates(&self, entity: EntityId) -> Option<Vec<EntityId>> {
        let out: Vec<EntityId> = self.pool(entity).iter().copied().filter(|&e| e != entity).collect();
        (!out.is_empty()).then_some(out)
    }

    /// Uniform draw from the candidates, or `None` if there are none.
    pub fn draw<R: Rng + ?Sized>(&self, entity: EntityId, rng: &mut R) -> Option<EntityId> {
        let pool = self.pool(entity);
        let (len, skip) = match pool.binary_search(&entity) {
            Ok(i) => (pool.len() - 1, i),
            Err(_) => (pool.len(), pool.len()),
        };
        if len == 0 {
            return None;
        }
        let i = rng.random_range(0..len);
        Some(pool[if i >= skip { i + 1 } else { i }])
    }

    pub fn distances(&self, entity: EntityId) -> DistanceVector {
        self.model
            .centroid_distances(self.reduced.row(entity as usize))
            .expect("dimensions checked at construction")
    }
}

fn uniform_other<R: Rng + ?Sized>(rng: &mut R, entity_count: usize, original: EntityId) -> EntityId {
    let draw = rng.random_range(0..entity_count as u32 - 1);
    if draw >= original {
        draw + 1
    } else {
        draw
    }
}

/// Draws one replacement via `draw`, redrawing up to [`FILTER_RETRIES`] times
/// while it forms a known true triple.
fn draw_filtered<R: Rng + ?Sized>(
    rng: &mut R,
    positive: &Triple,
    side: Side,
    filter: Option<&TrueTripleIndex>,
    mut draw: impl FnMut(&mut R) -> EntityId,
) -> EntityId {
    let mut e = draw(rng);
    if let Some(index) = filter {
        for _ in 0..FILTER_RETRIES {
            if !index.contains(&side.replace(positive, e)) {
                break;
            }
            e = draw(rng);
        }
    }
    e
}

/// Cluster-guided negatives. `filter` is consulted only when `config.filter_true`.
pub fn lemon_sample_batch<R: Rng + ?Sized>(
    batch: &[Triple],
    config: &NegSamplerConfig,
    neighborhood: &Neighborhood,
    filter: Option<&TrueTripleIndex>,
    rng: &mut R,
) -> NegativeBatch {
    let filter = filter.filter(|_| config.filter_true);
    let entity_count = neighborhood.num_entities();
    let mut out = NegativeBatch::default();
    for positive in batch {
        let side = choose_corrupt_position(rng, 0.5);
        let target = side.entity(positive);
        let pool = neighborhood.pool(target);
        let entities = if pool.len() > usize::from(pool.binary_search(&target).is_ok()) {
            (0..config.num_negatives)
                .map(|_| {
                    draw_filtered(rng, positive, side, filter, |r| {
                        neighborhood.draw(target, r).expect("pool has another member")
                    })
                })
                .collect()
        } else {
            log::debug!("no cluster candidates for entity {target}; sampling uniformly");
            out.fallbacks += 1;
            (0..config.num_negatives)
                .map(|_| draw_filtered(rng, positive, side, filter, |r| uniform_other(r, entity_count, target)))
                .collect()
        };
        out.corruptions.push(Corruption { side, entities });
    }
    out
}

/// Uniform negatives over every entity except the one being replaced.
pub fn uniform_sample_batch<R: Rng + ?Sized>(
    batch: &[Triple],
    config: &NegSamplerConfig,
    entity_count: usize,
    filter: Option<&TrueTripleIndex>,
    rng: &mut R,
) -> NegativeBatch {
    assert!(entity_count >= 2, "uniform corruption needs at least two entities");
    let filter = filter.filter(|_| config.filter_true);
    let corruptions = batch
        .iter()
        .map(|positive| {
            let side = choose_corrupt_position(rng, 0.5);
            let target = side.entity(positive);
            let entities = (0..config.num_negatives)
                .map(|_| draw_filtered(rng, positive, side, filter, |r| uniform_other(r, entity_count, target)))
                .collect();
            Corruption { side, entities }
        })
        .collect();
    NegativeBatch {
        corruptions,
        fallbacks: 0,
    }
}

/// A configured sampler, ready to corrupt batches.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    config: NegSamplerConfig,
    entity_count: usize,
    neighborhood: Option<Neighborhood>,
    filter: Option<TrueTripleIndex>,
}

impl NegativeSampler {
    pub fn uniform(config: NegSamplerConfig, entity_count: usize) -> Result<Self> {
        config.validate(None)?;
        if entity_count < 2 {
            return Err(Error::Config(
                "negative sampling needs at least two entities".to_owned(),
            ));
        }
        Ok(Self {
            config,
            entity_count,
            neighborhood: None,
            filter: None,
        })
    }

    pub fn lemon(config: NegSamplerConfig, neighborhood: Neighborhood) -> Result<Self> {
        config.validate(Some(neighborhood.model().k()))?;
        if neighborhood.num_entities() < 2 {
            return Err(Error::Config(
                "negative sampling needs at least two entities".to_owned(),
            ));
        }
        Ok(Self {
            config,
            entity_count: neighborhood.num_entities(),
            neighborhood: Some(neighborhood),
            filter: None,
        })
    }

    /// Triples to reject when `filter_true` is set.
    pub fn with_filter(mut self, index: TrueTripleIndex) -> Self {
        self.filter = Some(index);
        self
    }

    pub fn config(&self) -> &NegSamplerConfig {
        &self.config
    }

    pub fn neighborhood(&self) -> Option<&Neighborhood> {
        self.neighborhood.as_ref()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: &[Triple], rng: &mut R) -> NegativeBatch {
        match &self.neighborhood {
            Some(n) => lemon_sample_batch(batch, &self.config, n, self.filter.as_ref(), rng),
            None => uniform_sample_batch(batch, &self.config, self.entity_count, self.filter.as_ref(), rng),
        }
    }
}

/// `softmax(temperature * score)`, computed with max subtraction.
pub fn self_adv_weights(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if let Some(col) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { row: 0, col });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (temperature * (s - max)).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
