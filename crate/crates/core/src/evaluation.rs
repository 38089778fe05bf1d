//! Link-prediction ranking with raw and filtered protocols.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kg_data::{EntityId, Triple, TrueTripleIndex};
use crate::kge_models::KgeModel;
use crate::sampling::Side;

/// Anything that assigns plausibility scores to triples.
pub trait Scorer: Sync {
    fn num_entities(&self) -> usize;
    fn score(&self, triple: &Triple) -> f64;

    /// Scores of `triple` with `side` replaced by every entity, in id order.
    fn score_candidates(&self, triple: &Triple, side: Side, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.num_entities() as EntityId).map(|e| self.score(&side.replace(triple, e))));
    }
}

impl Scorer for KgeModel {
    fn num_entities(&self) -> usize {
        KgeModel::num_entities(self)
    }

    fn score(&self, triple: &Triple) -> f64 {
        KgeModel::score(self, triple)
    }

    fn score_candidates(&self, triple: &Triple, side: Side, out: &mut Vec<f64>) {
        let rot = self.rotation(triple.relation);
        out.clear();
        out.extend((0..self.num_entities() as EntityId).map(|e| self.score_rotated(&side.replace(triple, e), &rot)));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub triple: Triple,
    pub side: Side,
    pub raw_rank: f64,
    pub filtered_rank: f64,
}

/// Rank of the true entity among all substitutions at `side`.
///
/// `rank = 1 + #{better} + #{tied, other than the truth} / 2`. The filtered
/// rank ignores candidates that form another known true triple.
pub fn rank_query<S: Scorer + ?Sized>(model: &S, triple: &Triple, side: Side, index: &TrueTripleIndex) -> RankRecord {
    let mut scores = Vec::with_capacity(model.num_entities());
    model.score_candidates(triple, side, &mut scores);
    rank_from_scores(&scores, triple, side, index)
}

fn rank_from_scores(scores: &[f64], triple: &Triple, side: Side, index: &TrueTripleIndex) -> RankRecord {
    let truth = side.entity(triple);
    let target = scores[truth as usize];
    let known = match side {
        Side::Head => index.heads(triple.relation, triple.tail),
        Side::Tail => index.tails(triple.head, triple.relation),
    };
    let (mut raw_better, mut raw_ties, mut f_better, mut f_ties) = (0usize, 0usize, 0usize, 0usize);
    for (e, &s) in scores.iter().enumerate() {
        let e = e as EntityId;
        if e == truth {
            continue;
        }
        let filtered_out = known.is_some_and(|k| k.contains(&e));
        if s > target {
            raw_better += 1;
            f_better += usize::from(!filtered_out);
        } else if s == target {
            raw_ties += 1;
            f_ties += usize::from(!filtered_out);
        }
    }
    RankRecord {
        triple: *triple,
        side,
        raw_rank: 1.0 + raw_better as f64 + raw_ties as f64 / 2.0,
        filtered_rank: 1.0 + f_better as f64 + f_ties as f64 / 2.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mr: f64,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[f64]) -> Self {
        if ranks.is_empty() {
            return Self {
                mr: 0.0,
                mrr: 0.0,
                hits1: 0.0,
                hits3: 0.0,
                hits10: 0.0,
            };
        }
        let n = ranks.len() as f64;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Self {
            mr: ranks.iter().sum::<f64>() / n,
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hits1: hits(1.0),
            hits3: hits(3.0),
            hits10: hits(10.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub raw: Metrics,
    pub filtered: Metrics,
    pub queries: usize,
}

impl MetricsReport {
    pub fn from_records(records: &[RankRecord]) -> Self {
        let raw: Vec<f64> = records.iter().map(|r| r.raw_rank).collect();
        let filtered: Vec<f64> = records.iter().map(|r| r.filtered_rank).collect();
        Self {
            raw: Metrics::from_ranks(&raw),
            filtered: Metrics::from_ranks(&filtered),
            queries: records.len(),
        }
    }

    /// Aligned text table, Hits in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>10} {:>10}", "Metric", "Filtered", "Raw");
        type Row = (&'static str, fn(&Metrics) -> f64, bool);
        let rows: [Row; 5] = [
            ("MRR", |m| m.mrr, false),
            ("H@10", |m| m.hits10, true),
            ("H@3", |m| m.hits3, true),
            ("H@1", |m| m.hits1, true),
            ("MR", |m| m.mr, false),
        ];
        for (name, get, pct) in rows {
            let fmt = |v: f64| {
                if pct {
                    format!("{:.2}", 100.0 * v)
                } else {
                    format!("{v:.4}")
                }
            };
            let _ = writeln!(
                out,
                "{:<8} {:>10} {:>10}",
                name,
                fmt(get(&self.filtered)),
                fmt(get(&self.raw))
            );
        }
        let _ = writeln!(out, "{:<8} {:>10}", "Queries", self.queries);
        out
    }
}

/// Head and tail ranks for every test triple, in input order.
pub fn rank_all<S: Scorer + ?Sized>(model: &S, test: &[Triple], index: &TrueTripleIndex) -> Vec<RankRecord> {
    test.par_iter()
        .flat_map_iter(|t| {
            let mut scores = Vec::with_capacity(model.num_entities());
            [Side::Head, Side::Tail].map(|side| {
                model.score_candidates(t, side, &mut scores);
                rank_from_scores(&scores, t, side, index)
            })
        })
        .collect()
}

pub fn evaluate<S: Scorer + ?Sized>(model: &S, test: &[Triple], index: &TrueTripleIndex) -> MetricsReport {
    MetricsReport::from_records(&rank_all(model, test, index))
}
