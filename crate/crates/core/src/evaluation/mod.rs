//! Retrieval scoring and the comparative experiment drivers.

pub mod experiments;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::{DatasetBundle, Sample};
use crate::trainer::ModelState;

pub use experiments::{
    run_condition_ablation, run_overlap_sweep, run_stability_comparison, run_variants, summarize, RunRecord,
    SummaryRow, Variant,
};

/// Features with their identity and camera labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSet {
    pub features: Tensor,
    pub ids: Vec<u32>,
    pub cams: Vec<u16>,
}

impl RetrievalSet {
    pub fn new(features: Tensor, samples: &[Sample]) -> Self {
        Self {
            features,
            ids: samples.iter().map(|s| s.y).collect(),
            cams: samples.iter().map(|s| s.c).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub queries: usize,
    pub gallery: usize,
}

/// Per-query outcome: 0-based rank of the first correct match and AP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryScore {
    pub first_hit: usize,
    pub ap: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Rank the gallery for one query, drop junk (same identity and camera),
/// and compute its first-hit rank and average precision. Ties in distance
/// keep gallery order.
pub fn score_query(query: &RetrievalSet, q: usize, gallery: &RetrievalSet) -> Result<QueryScore> {
    let qf = query.features.row_slice(q);
    let (qy, qc) = (query.ids[q], query.cams[q]);
    let mut ranked: Vec<(f64, usize)> = (0..gallery.len())
        .filter(|&g| !(gallery.ids[g] == qy && gallery.cams[g] == qc))
        .map(|g| (sq_dist(qf, gallery.features.row_slice(g)), g))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first_hit = None;
    for (pos, &(_, g)) in ranked.iter().enumerate() {
        if gallery.ids[g] == qy {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first_hit.get_or_insert(pos);
        }
    }
    let first_hit = first_hit.ok_or_else(|| Error::Invalid(format!("query {q} has no valid gallery match")))?;
    Ok(QueryScore {
        first_hit,
        ap: precision_sum / hits as f64,
    })
}

/// CMC rank-1/5/10 and mAP, as percentages.
pub fn score(query: &RetrievalSet, gallery: &RetrievalSet) -> Result<EvalResult> {
    if query.is_empty() {
        return Err(Error::Invalid("no queries to score".into()));
    }
    if query.features.cols() != gallery.features.cols() {
        return Err(Error::Invalid("query and gallery feature dimensions differ".into()));
    }
    let per: Vec<QueryScore> = (0..query.len())
        .into_par_iter()
        .map(|q| score_query(query, q, gallery))
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let rank = |k: usize| 100.0 * per.iter().filter(|s| s.first_hit < k).count() as f64 / n;
    Ok(EvalResult {
        rank1: rank(1),
        rank5: rank(5),
        rank10: rank(10),
        map: 100.0 * per.iter().map(|s| s.ap).sum::<f64>() / n,
        queries: query.len(),
        gallery: gallery.len(),
    })
}

/// Score a model's encoder features on the dataset's query and gallery.
pub fn evaluate(model: &ModelState, data: &DatasetBundle) -> Result<EvalResult> {
    let q = RetrievalSet::new(model.embed(&data.query)?, &data.query);
    let g = RetrievalSet::new(model.embed(&data.gallery)?, &data.gallery);
    score(&q, &g)
}
