//! Encoder-side objectives: cross-camera feature alignment, identity
//! cross-entropy, and the multi-camera negative loss with batch-hard mining.

use serde::{Deserialize, Serialize};

use crate::error::NumericsError;
use crate::numerics::{log_softmax, NodeId, Tape, Tensor};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ccfa: f64,
    pub id: f64,
    pub mcnl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ccfa: 0.5,
            id: 4.0,
            mcnl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), NumericsError> {
        for (name, w) in [("ccfa", self.ccfa), ("id", self.id), ("mcnl", self.mcnl)] {
            if !w.is_finite() || w < 0.0 {
                return Err(NumericsError::InvalidArgument(format!(
                    "weight {name} = {w} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McnlMargins {
    pub m1: f64,
    pub m2: f64,
}

impl Default for McnlMargins {
    fn default() -> Self {
        Self { m1: 0.1, m2: 0.1 }
    }
}

/// Values of the three encoder terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderTerms {
    pub ccfa: f64,
    pub id: f64,
    pub mcnl: f64,
}

pub fn encoder_loss(terms: &EncoderTerms, weights: &LossWeights) -> f64 {
    weights.ccfa * terms.ccfa + weights.id * terms.id + weights.mcnl * terms.mcnl
}

/// `(1/C)·Σ_i ‖f̄ − g_i‖²` for one feature.
pub fn ccfa(fbar: &[f64], generated: &[Vec<f64>]) -> Result<f64, NumericsError> {
    if generated.is_empty() {
        return Err(NumericsError::InvalidArgument(
            "CCFA needs at least one generated feature".into(),
        ));
    }
    let mut total = 0.0;
    for g in generated {
        if g.len() != fbar.len() {
            return Err(NumericsError::ShapeMismatch {
                node: "ccfa".into(),
                detail: format!("generated feature of length {} vs {}", g.len(), fbar.len()),
            });
        }
        total += fbar.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / generated.len() as f64)
}

/// Batched CCFA averaged over samples. `generated` is `[n * C, d]` in
/// sample-major order and is detached, so only `fbar` receives gradient.
pub fn ccfa_nodes(tape: &mut Tape, fbar: NodeId, generated: NodeId, cams: usize) -> Result<NodeId, NumericsError> {
    let n = tape.value(fbar).rows();
    if cams == 0 || tape.value(generated).rows() != n * cams {
        return Err(NumericsError::ShapeMismatch {
            node: tape.node_name(generated),
            detail: format!("expected {} generated rows for {n} samples x {cams} cameras", n * cams),
        });
    }
    let g = tape.detach(generated);
    let index: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, cams)).collect();
    let rep = tape.gather_rows(fbar, &index)?;
    let diff = tape.sub(rep, g)?;
    let ss = tape.sum_sq(diff);
    Ok(tape.scale(ss, 1.0 / (n * cams) as f64))
}

/// `−log q[y]` with `q[y]` floored at [`PROB_FLOOR`].
pub fn id_loss(q: &[f64], y: usize) -> Result<f64, NumericsError> {
    let p = *q
        .get(y)
        .ok_or_else(|| NumericsError::InvalidArgument(format!("label {y} out of range for {} classes", q.len())))?;
    Ok(-(p.max(PROB_FLOOR)).ln())
}

/// Batch-mean identity cross-entropy from logits.
pub fn id_loss_nodes(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId, NumericsError> {
    tape.softmax_xent(logits, labels, PROB_FLOOR)
}

/// Batch-mean identity cross-entropy from logits, computed on values.
pub fn id_loss_logits(logits: &Tensor, labels: &[usize]) -> Result<f64, NumericsError> {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let q: Vec<f64> = log_softmax(logits.row_slice(r)).into_iter().map(f64::exp).collect();
        total += id_loss(&q, y)?;
    }
    Ok(total / labels.len() as f64)
}

/// Mined samples for one anchor. A missing sample disables the terms that
/// need it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McnlMining {
    pub anchor: usize,
    pub positive: Option<usize>,
    pub inter: Option<usize>,
    pub intra: Option<usize>,
}

fn dist(f: &Tensor, a: usize, b: usize) -> f64 {
    f.row_slice(a)
        .iter()
        .zip(f.row_slice(b))
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Batch-hard mining: farthest positive, nearest cross-camera negative and
/// nearest same-camera negative. Ties go to the lowest index.
pub fn mine_mcnl(features: &Tensor, ids: &[usize], cams: &[usize]) -> Result<Vec<McnlMining>, NumericsError> {
    let n = features.rows();
    if ids.len() != n || cams.len() != n {
        return Err(NumericsError::ShapeMismatch {
            node: "mcnl".into(),
            detail: format!("{n} features, {} identities, {} cameras", ids.len(), cams.len()),
        });
    }
    if cams.iter().all(|&c| c == cams[0]) {
        return Err(NumericsError::InvalidArgument(
            "MCNL is undefined for a batch from a single camera".into(),
        ));
    }
    let pick = |a: usize, keep: &dyn Fn(usize) -> bool, farthest: bool| -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| j != a && keep(j)) {
            let d = dist(features, a, j);
            let better = match best {
                None => true,
                Some((_, bd)) if farthest => d > bd,
                Some((_, bd)) => d < bd,
            };
            if better {
                best = Some((j, d));
            }
        }
        best.map(|(j, _)| j)
    };
    Ok((0..n)
        .map(|a| McnlMining {
            anchor: a,
            positive: pick(a, &|j| ids[j] == ids[a], true),
            inter: pick(a, &|j| ids[j] != ids[a] && cams[j] != cams[a], false),
            intra: pick(a, &|j| ids[j] != ids[a] && cams[j] == cams[a], false),
        })
        .collect())
}

fn pair_dist(tape: &mut Tape, f: NodeId, left: &[usize], right: &[usize]) -> Result<NodeId, NumericsError> {
    let l = tape.gather_rows(f, left)?;
    let r = tape.gather_rows(f, right)?;
    let diff = tape.sub(l, r)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.row_sum(sq)?;
    Ok(tape.sqrt(s))
}

fn hinge_sum(
    tape: &mut Tape,
    f: NodeId,
    triples: &[(usize, usize, usize)],
    margin: f64,
) -> Result<Option<NodeId>, NumericsError> {
    if triples.is_empty() {
        return Ok(None);
    }
    let a: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let near: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let far: Vec<usize> = triples.iter().map(|t| t.2).collect();
    let d_near = pair_dist(tape, f, &a, &near)?;
    let d_far = pair_dist(tape, f, &a, &far)?;
    let gap = tape.sub(d_near, d_far)?;
    let gap = tape.add_const(gap, margin);
    let h = tape.relu(gap);
    Ok(Some(tape.sum(h)))
}

/// Mean over anchors of
/// `[d(a,p) − d(a,n_inter) + m1]₊ + [d(a,n_inter) − d(a,n_intra) + m2]₊`
/// on Euclidean distances between rows of `fbar`.
pub fn mcnl_nodes(
    tape: &mut Tape,
    fbar: NodeId,
    ids: &[usize],
    cams: &[usize],
    margins: McnlMargins,
) -> Result<NodeId, NumericsError> {
    let mined = mine_mcnl(tape.value(fbar), ids, cams)?;
    let n = mined.len();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for m in &mined {
        if let (Some(p), Some(ni)) = (m.positive, m.inter) {
            first.push((m.anchor, p, ni));
        }
        if let (Some(ni), Some(nt)) = (m.inter, m.intra) {
            second.push((m.anchor, ni, nt));
        }
    }
    let t1 = hinge_sum(tape, fbar, &first, margins.m1)?;
    let t2 = hinge_sum(tape, fbar, &second, margins.m2)?;
    let total = match (t1, t2) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Value-level MCNL for a batch of feature vectors.
pub fn mcnl(features: &[Vec<f64>], ids: &[usize], cams: &[usize], margins: McnlMargins) -> Result<f64, NumericsError> {
    if features.is_empty() {
        return Err(NumericsError::InvalidArgument("MCNL on an empty batch".into()));
    }
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::stack_rows(features));
    let out = mcnl_nodes(&mut tape, f, ids, cams, margins)?;
    Ok(tape.value(out).item())
}
