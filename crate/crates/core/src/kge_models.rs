//! TransE, DistMult and RotatE: scoring, the logistic negative-sampling loss
//! with exact gradients, and a row-sparse Adam optimizer.
//!
//! Scores follow a plausibility convention (higher = more plausible):
//!
//! ```text
//! TransE    gamma - || h + r - t ||
//! RotatE    gamma - sum_d | h_d * exp(i theta_{r,d}) - t_d |     (L1)
//! DistMult  sum_d h_d * r_d * t_d
//! ```
//!
//! RotatE entity rows hold `dim` real parts followed by `dim` imaginary parts;
//! relation rows hold `dim` phases kept in (-pi, pi].

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg_data::Triple;
use crate::lemb;
use crate::rng::{stream_rng, Stream};
use crate::sampling::{self_adv_weights, NegativeBatch};

pub const HEADER_FILE: &str = "model.json";
pub const ENTITY_FILE: &str = "entity.lemb";
pub const RELATION_FILE: &str = "relation.lemb";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    TransE,
    DistMult,
    RotatE,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::TransE => "transe",
            ModelKind::DistMult => "distmult",
            ModelKind::RotatE => "rotate",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transe" => Ok(ModelKind::TransE),
            "distmult" => Ok(ModelKind::DistMult),
            "rotate" => Ok(ModelKind::RotatE),
            other => Err(Error::InvalidArgument(format!(
                "unknown model `{other}` (expected transe, distmult or rotate)"
            ))),
        }
    }
}

/// Distance aggregation for TransE and RotatE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Plain,
    SelfAdversarial,
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_phase(theta: f64) -> f64 {
    let wrapped = PI - (PI - theta).rem_euclid(2.0 * PI);
    if wrapped <= -PI {
        wrapped + 2.0 * PI
    } else {
        wrapped
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KgeModel {
    pub kind: ModelKind,
    pub dim: usize,
    pub gamma: f64,
    pub norm: Norm,
    num_entities: usize,
    num_relations: usize,
    entity: Vec<f64>,
    relation: Vec<f64>,
    pub seed: u64,
    pub step: u64,
}

impl KgeModel {
    /// Uniform init in `[-(gamma + 2) / dim, (gamma + 2) / dim]`; RotatE phases
    /// uniform in (-pi, pi].
    pub fn init(
        kind: ModelKind,
        num_entities: usize,
        num_relations: usize,
        dim: usize,
        gamma: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be >= 1".to_owned()));
        }
        if !gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("margin must be finite, got {gamma}")));
        }
        let mut rng = stream_rng(seed, Stream::ModelInit);
        let range = (gamma + 2.0) / dim as f64;
        let entity_width = entity_width(kind, dim);
        let entity = (0..num_entities * entity_width)
            .map(|_| rng.random_range(-range..=range))
            .collect();
        let relation = (0..num_relations * dim)
            .map(|_| match kind {
                ModelKind::RotatE => wrap_phase(rng.random_range(-PI..PI)),
                _ => rng.random_range(-range..=range),
            })
            .collect();
        Ok(Self {
            kind,
            dim,
            gamma,
            norm: Norm::L1,
            num_entities,
            num_relations,
            entity,
            relation,
            seed,
            step: 0,
        })
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn entity_width(&self) -> usize {
        entity_width(self.kind, self.dim)
    }

    pub fn relation_width(&self) -> usize {
        self.dim
    }

    pub fn entity_row(&self, e: u32) -> &[f64] {
        let w = self.entity_width();
        &self.entity[e as usize * w..(e as usize + 1) * w]
    }

    pub fn relation_row(&self, r: u32) -> &[f64] {
        let w = self.relation_width();
        &self.relation[r as usize * w..(r as usize + 1) * w]
    }

    pub fn entity_row_mut(&mut self, e: u32) -> &mut [f64] {
        let w = self.entity_width();
        &mut self.entity[e as usize * w..(e as usize + 1) * w]
    }

    pub fn relation_row_mut(&mut self, r: u32) -> &mut [f64] {
        let w = self.relation_width();
        &mut self.relation[r as usize * w..(r as usize + 1) * w]
    }

    pub fn entity_params(&self) -> &[f64] {
        &self.entity
    }

    pub fn relation_params(&self) -> &[f64] {
        &self.relation
    }

    pub fn score(&self, triple: &Triple) -> f64 {
        match self.kind {
            ModelKind::RotatE => self.score_rotated(triple, &self.rotation(triple.relation)),
            _ => self.score_rotated(triple, &[]),
        }
    }

    /// `(sin, cos)` of each phase of relation `r`; empty unless RotatE.
    pub fn rotation(&self, r: u32) -> Vec<(f64, f64)> {
        match self.kind {
            ModelKind::RotatE => self.relation_row(r).iter().map(|t| t.sin_cos()).collect(),
            _ => Vec::new(),
        }
    }

    /// [`Self::score`] with the relation's rotation precomputed.
    pub fn score_rotated(&self, triple: &Triple, rot: &[(f64, f64)]) -> f64 {
        let h = self.entity_row(triple.head);
        let r = self.relation_row(triple.relation);
        let t = self.entity_row(triple.tail);
        let d = self.dim;
        match (self.kind, self.norm) {
            (ModelKind::TransE, Norm::L1) => self.gamma - (0..d).map(|i| (h[i] + r[i] - t[i]).abs()).sum::<f64>(),
            (ModelKind::TransE, Norm::L2) => {
                self.gamma - (0..d).map(|i| (h[i] + r[i] - t[i]).powi(2)).sum::<f64>().sqrt()
            }
            (ModelKind::DistMult, _) => (0..d).map(|i| h[i] * r[i] * t[i]).sum(),
            (ModelKind::RotatE, norm) => {
                let mut acc = 0.0;
                for (i, &(sin, cos)) in rot.iter().enumerate().take(d) {
                    let u = h[i] * cos - h[d + i] * sin - t[i];
                    let v = h[i] * sin + h[d + i] * cos - t[d + i];
                    acc += match norm {
                        Norm::L1 => (u * u + v * v).sqrt(),
                        Norm::L2 => u * u + v * v,
                    };
                }
                match norm {
                    Norm::L1 => self.gamma - acc,
                    Norm::L2 => self.gamma - acc.sqrt(),
                }
            }
        }
    }

    /// Score, plus `coeff * d(score)/d(params)` accumulated into `grads`.
    pub fn score_with_grad(&self, triple: &Triple, coeff: f64, grads: &mut SparseGrads) -> f64 {
        self.score_impl(triple, &self.rotation(triple.relation), Some((coeff, grads)))
    }

    fn score_impl(&self, triple: &Triple, rot: &[(f64, f64)], grad: Option<(f64, &mut SparseGrads)>) -> f64 {
        let h = self.entity_row(triple.head);
        let r = self.relation_row(triple.relation);
        let t = self.entity_row(triple.tail);
        let d = self.dim;
        match self.kind {
            ModelKind::TransE => {
                let x: Vec<f64> = (0..d).map(|i| h[i] + r[i] - t[i]).collect();
                let (dist, dscore_dx) = self.aggregate(&x, grad.is_some());
                if let Some((c, grads)) = grad {
                    let g: Vec<f64> = dscore_dx.iter().map(|v| c * v).collect();
                    grads.add_entity(triple.head, d, &g, 1.0);
                    grads.add_relation(triple.relation, d, &g, 1.0);
                    grads.add_entity(triple.tail, d, &g, -1.0);
                }
                self.gamma - dist
            }
            ModelKind::DistMult => {
                let s = (0..d).map(|i| h[i] * r[i] * t[i]).sum();
                if let Some((c, grads)) = grad {
                    let gh: Vec<f64> = (0..d).map(|i| c * r[i] * t[i]).collect();
                    let gr: Vec<f64> = (0..d).map(|i| c * h[i] * t[i]).collect();
                    let gt: Vec<f64> = (0..d).map(|i| c * h[i] * r[i]).collect();
                    grads.add_entity(triple.head, d, &gh, 1.0);
                    grads.add_relation(triple.relation, d, &gr, 1.0);
                    grads.add_entity(triple.tail, d, &gt, 1.0);
                }
                s
            }
            ModelKind::RotatE => {
                let (h_re, h_im) = h.split_at(d);
                let (t_re, t_im) = t.split_at(d);
                let mut u = vec![0.0; d];
                let mut v = vec![0.0; d];
                let mut rot_re = vec![0.0; d];
                let mut rot_im = vec![0.0; d];
                for i in 0..d {
                    let (sin, cos) = rot[i];
                    rot_re[i] = h_re[i] * cos - h_im[i] * sin;
                    rot_im[i] = h_re[i] * sin + h_im[i] * cos;
                    u[i] = rot_re[i] - t_re[i];
                    v[i] = rot_im[i] - t_im[i];
                }
                let (dist, ds_du, ds_dv) = match self.norm {
                    Norm::L1 => {
                        let moduli: Vec<f64> = (0..d).map(|i| (u[i] * u[i] + v[i] * v[i]).sqrt()).collect();
                        let safe = |x: f64, m: f64| if m > 0.0 { -x / m } else { 0.0 };
                        (
                            moduli.iter().sum::<f64>(),
                            (0..d).map(|i| safe(u[i], moduli[i])).collect::<Vec<_>>(),
                            (0..d).map(|i| safe(v[i], moduli[i])).collect::<Vec<_>>(),
                        )
                    }
                    Norm::L2 => {
                        let dist = (0..d).map(|i| u[i] * u[i] + v[i] * v[i]).sum::<f64>().sqrt();
                        let safe = |x: f64| if dist > 0.0 { -x / dist } else { 0.0 };
                        (
                            dist,
                            u.iter().map(|&x| safe(x)).collect(),
                            v.iter().map(|&x| safe(x)).collect(),
                        )
                    }
                };
                if let Some((c, grads)) = grad {
                    let mut gh = vec![0.0; 2 * d];
                    let mut gt = vec![0.0; 2 * d];
                    let mut gr = vec![0.0; d];
                    for i in 0..d {
                        let (sin, cos) = rot[i];
                        let (du, dv) = (c * ds_du[i], c * ds_dv[i]);
                        gh[i] = du * cos + dv * sin;
                        gh[d + i] = -du * sin + dv * cos;
                        gt[i] = -du;
                        gt[d + i] = -dv;
                        gr[i] = -du * rot_im[i] + dv * rot_re[i];
                    }
                    grads.add_entity(triple.head, 2 * d, &gh, 1.0);
                    grads.add_relation(triple.relation, d, &gr, 1.0);
                    grads.add_entity(triple.tail, 2 * d, &gt, 1.0);
                }
                self.gamma - dist
            }
        }
    }

    /// Distance of `x` under the configured norm and, if asked, d(-dist)/dx.
    fn aggregate(&self, x: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        match self.norm {
            Norm::L1 => {
                let dist = x.iter().map(|v| v.abs()).sum();
                let g = if want_grad {
                    x.iter()
                        .map(|&v| {
                            if v > 0.0 {
                                -1.0
                            } else if v < 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                (dist, g)
            }
            Norm::L2 => {
                let dist = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let g = if want_grad {
                    x.iter().map(|&v| if dist > 0.0 { -v / dist } else { 0.0 }).collect()
                } else {
                    Vec::new()
                };
                (dist, g)
            }
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = CheckpointHeader {
            kind: self.kind,
            dim: self.dim,
            gamma: self.gamma,
            norm: self.norm,
            num_entities: self.num_entities,
            num_relations: self.num_relations,
            seed: self.seed,
            step: self.step,
        };
        let path = dir.join(HEADER_FILE);
        fs::write(&path, serde_json::to_string_pretty(&header)? + "\n").map_err(|e| Error::io(&path, e))?;
        let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        lemb::write_file(
            dir.join(ENTITY_FILE),
            self.num_entities,
            self.entity_width(),
            &to_f32(&self.entity),
        )?;
        lemb::write_file(
            dir.join(RELATION_FILE),
            self.num_relations,
            self.relation_width(),
            &to_f32(&self.relation),
        )
    }

    /// Loads a checkpoint. Parameters are stored as f32, so a reload is exact
    /// only up to f32 rounding of the in-memory f64 values.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(HEADER_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text)?;
        let entity = lemb::read_file(dir.join(ENTITY_FILE))?;
        let relation = lemb::read_file(dir.join(RELATION_FILE))?;
        let ew = entity_width(header.kind, header.dim);
        if (entity.rows, entity.cols) != (header.num_entities, ew)
            || (relation.rows, relation.cols) != (header.num_relations, header.dim)
        {
            return Err(Error::Shape(format!(
                "checkpoint matrices {}x{} / {}x{} do not match header",
                entity.rows, entity.cols, relation.rows, relation.cols
            )));
        }
        Ok(Self {
            kind: header.kind,
            dim: header.dim,
            gamma: header.gamma,
            norm: header.norm,
            num_entities: header.num_entities,
            num_relations: header.num_relations,
            entity: entity.data.iter().map(|&v| f64::from(v)).collect(),
            relation: relation.data.iter().map(|&v| f64::from(v)).collect(),
            seed: header.seed,
            step: header.step,
        })
    }
}

fn entity_width(kind: ModelKind, dim: usize) -> usize {
    match kind {
        ModelKind::RotatE => 2 * dim,
        _ => dim,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: ModelKind,
    dim: usize,
    gamma: f64,
    norm: Norm,
    num_entities: usize,
    num_relations: usize,
    seed: u64,
    step: u64,
}

/// Gradients for the rows a batch touched, keyed by id in ascending order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrads {
    pub entity: BTreeMap<u32, Vec<f64>>,
    pub relation: BTreeMap<u32, Vec<f64>>,
}

impl SparseGrads {
    fn add_entity(&mut self, id: u32, width: usize, g: &[f64], sign: f64) {
        add_row(&mut self.entity, id, width, g, sign);
    }

    fn add_relation(&mut self, id: u32, width: usize, g: &[f64], sign: f64) {
        add_row(&mut self.relation, id, width, g, sign);
    }
}

fn add_row(map: &mut BTreeMap<u32, Vec<f64>>, id: u32, width: usize, g: &[f64], sign: f64) {
    let row = map.entry(id).or_insert_with(|| vec![0.0; width]);
    for (acc, v) in row.iter_mut().zip(g) {
        *acc += sign * v;
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean over positives of
/// `-ln sigmoid(s_pos) - sum_i w_i ln sigmoid(-s_neg_i)`,
/// with `w_i = 1/N` (plain) or `softmax(temperature * s_neg)` held constant
/// (self-adversarial).
pub fn loss_and_grads(
    model: &KgeModel,
    positives: &[Triple],
    negatives: &NegativeBatch,
    mode: LossMode,
    temperature: f64,
) -> Result<(f64, SparseGrads)> {
    if positives.len() != negatives.len() {
        return Err(Error::Shape(format!(
            "{} positives but {} negative groups",
            positives.len(),
            negatives.len()
        )));
    }
    let mut grads = SparseGrads::default();
    if positives.is_empty() {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / positives.len() as f64;
    let mut total = 0.0;
    let mut rotations: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, pos) in positives.iter().enumerate() {
        let rot = rotations
            .entry(pos.relation)
            .or_insert_with(|| model.rotation(pos.relation));
        let negs: Vec<Triple> = negatives.triples(i, pos).collect();
        let neg_scores: Vec<f64> = negs.iter().map(|t| model.score_rotated(t, rot)).collect();
        let weights = match mode {
            LossMode::Plain => vec![1.0 / negs.len().max(1) as f64; negs.len()],
            LossMode::SelfAdversarial => {
                self_adv_weights(&neg_scores, temperature).map_err(|_| Error::NonFiniteLoss(*pos))?
            }
        };
        let pos_score = model.score_rotated(pos, rot);
        let loss = softplus(-pos_score)
            + neg_scores
                .iter()
                .zip(&weights)
                .map(|(s, w)| w * softplus(*s))
                .sum::<f64>();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(*pos));
        }
        total += loss;

        model.score_impl(pos, rot, Some((-sigmoid(-pos_score) * scale, &mut grads)));
        for ((t, s), w) in negs.iter().zip(&neg_scores).zip(&weights) {
            model.score_impl(t, rot, Some((w * sigmoid(*s) * scale, &mut grads)));
        }
    }
    Ok((total * scale, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments per parameter. Rows are only touched when they receive a
/// gradient; bias correction uses the global step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    entity_m: Vec<f64>,
    entity_v: Vec<f64>,
    relation_m: Vec<f64>,
    relation_v: Vec<f64>,
}

impl AdamState {
    pub fn new(model: &KgeModel, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            entity_m: vec![0.0; model.entity.len()],
            entity_v: vec![0.0; model.entity.len()],
            relation_m: vec![0.0; model.relation.len()],
            relation_v: vec![0.0; model.relation.len()],
        }
    }
}

/// One Adam step over the touched rows. Untouched rows are left bitwise intact.
pub fn apply_update(model: &mut KgeModel, grads: &SparseGrads, state: &mut AdamState, lr: f64) {
    state.step += 1;
    model.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let step_rows = |params: &mut [f64], m: &mut [f64], v: &mut [f64], width: usize, rows: &BTreeMap<u32, Vec<f64>>| {
        for (&id, g) in rows {
            let range = id as usize * width..(id as usize + 1) * width;
            for (((p, mi), vi), gi) in params[range.clone()]
                .iter_mut()
                .zip(&mut m[range.clone()])
                .zip(&mut v[range])
                .zip(g)
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *p -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
    };

    let ew = model.entity_width();
    let rw = model.relation_width();
    step_rows(
        &mut model.entity,
        &mut state.entity_m,
        &mut state.entity_v,
        ew,
        &grads.entity,
    );
    step_rows(
        &mut model.relation,
        &mut state.relation_m,
        &mut state.relation_v,
        rw,
        &grads.relation,
    );

    if model.kind == ModelKind::RotatE {
        for &id in grads.relation.keys() {
            for theta in model.relation_row_mut(id) {
                *theta = wrap_phase(*theta);
            }
        }
    }
}
