//! Posterior-collapse instrumentation and 2-D feature projections.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, NumericsError, Result};
use crate::trainer::MetricsRecord;

/// `(1/d)·mean‖f − g‖²` over paired rows.
pub fn sigma_hat_rows(f: &[&[f64]], g: &[&[f64]]) -> Result<f64, NumericsError> {
    if f.is_empty() || f.len() != g.len() {
        return Err(NumericsError::InvalidArgument(format!(
            "sigma_hat needs equal, non-empty sets (got {} and {})",
            f.len(),
            g.len()
        )));
    }
    let d = f[0].len();
    let mut total = 0.0;
    for (a, b) in f.iter().zip(g) {
        if a.len() != d || b.len() != d {
            return Err(NumericsError::InvalidArgument(
                "sigma_hat vectors differ in dimension".into(),
            ));
        }
        total += a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    Ok(total / (f.len() * d) as f64)
}

pub fn sigma_hat(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64, NumericsError> {
    let f: Vec<&[f64]> = pairs.iter().map(|p| p.0.as_slice()).collect();
    let g: Vec<&[f64]> = pairs.iter().map(|p| p.1.as_slice()).collect();
    sigma_hat_rows(&f, &g)
}

/// Scalar population variance `(1/d)·mean‖f − mean(f)‖²`. Zero for an
/// empty batch.
pub fn var_rows(batch: &[&[f64]]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let n = batch.len() as f64;
    let d = batch[0].len();
    let mut mean = vec![0.0; d];
    for row in batch {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v / n;
        }
    }
    let ss: f64 = batch
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
        .sum();
    ss / (n * d as f64)
}

pub fn var_of(batch: &[Vec<f64>]) -> f64 {
    let rows: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
    var_rows(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Stable,
    Collapsed,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseThresholds {
    /// Collapse needs the peak σ̂² to exceed this multiple of the first epoch.
    pub growth: f64,
    /// Collapse needs σ̂² and var(f) to correlate above this.
    pub correlation: f64,
    /// Stability needs σ̂² to stay at or below this after warmup.
    pub stable_bound: f64,
    pub warmup_epochs: usize,
    pub min_epochs: usize,
}

impl Default for CollapseThresholds {
    fn default() -> Self {
        Self {
            growth: 5.0,
            correlation: 0.9,
            stable_bound: 2.0,
            warmup_epochs: 5,
            min_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub verdict: Verdict,
    pub sigma_hat: Vec<f64>,
    pub var_f: Vec<f64>,
    pub var_fbar: Vec<f64>,
    /// Pearson correlation of σ̂² with var(f) over the log.
    pub correlation: f64,
    /// Peak σ̂² divided by the first epoch's value.
    pub growth: f64,
    /// Largest σ̂² after warmup.
    pub max_after_warmup: f64,
    /// Epochs (1-based) whose σ̂² exceeded the growth threshold.
    pub growth_epochs: Vec<usize>,
    /// Epochs (1-based) after warmup whose σ̂² exceeded the stable bound.
    pub bound_epochs: Vec<usize>,
    /// Epochs (1-based) with non-finite σ̂² or var(f).
    pub non_finite_epochs: Vec<usize>,
}

/// Pearson correlation; zero when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Classify a training trajectory.
///
/// Collapsed: the peak σ̂² exceeds `growth` times its first value and σ̂²
/// correlates with var(f) above `correlation`, or the log holds non-finite
/// values. Stable: after warmup σ̂² never exceeds `stable_bound` and the mean
/// of the last quarter of the post-warmup series is no larger than the mean
/// of the first quarter. Anything else, or a log shorter than `min_epochs`,
/// is inconclusive.
pub fn detect_collapse(log: &[MetricsRecord], th: &CollapseThresholds) -> CollapseReport {
    let sigma: Vec<f64> = log.iter().map(|r| r.sigma_hat).collect();
    let var_f: Vec<f64> = log.iter().map(|r| r.var_f).collect();
    let var_fbar: Vec<f64> = log.iter().map(|r| r.var_fbar).collect();
    let non_finite_epochs: Vec<usize> = log
        .iter()
        .filter(|r| !(r.sigma_hat.is_finite() && r.var_f.is_finite()))
        .map(|r| r.epoch)
        .collect();
    let first = sigma.first().copied().unwrap_or(f64::NAN);
    let peak = sigma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let growth = if first > 0.0 { peak / first } else { f64::INFINITY };
    let growth_epochs = log
        .iter()
        .filter(|r| r.sigma_hat > th.growth * first)
        .map(|r| r.epoch)
        .collect();
    let warm = th.warmup_epochs.min(log.len());
    let post = &sigma[warm..];
    let max_after_warmup = post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bound_epochs: Vec<usize> = log[warm..]
        .iter()
        .filter(|r| r.sigma_hat > th.stable_bound)
        .map(|r| r.epoch)
        .collect();
    let correlation = pearson(&sigma, &var_f);

    let verdict = if log.len() < th.min_epochs || post.is_empty() {
        Verdict::Inconclusive
    } else if !non_finite_epochs.is_empty() || (growth > th.growth && correlation > th.correlation) {
        Verdict::Collapsed
    } else {
        let q = (post.len() / 4).max(1);
        let head = post[..q].iter().sum::<f64>() / q as f64;
        let tail = post[post.len() - q..].iter().sum::<f64>() / q as f64;
        if bound_epochs.is_empty() && tail <= head {
            Verdict::Stable
        } else {
            Verdict::Inconclusive
        }
    };
    CollapseReport {
        verdict,
        sigma_hat: sigma,
        var_f,
        var_fbar,
        correlation,
        growth,
        max_after_warmup,
        growth_epochs,
        bound_epochs,
        non_finite_epochs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Extracted,
    Generated,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Extracted => "extracted",
            Source::Generated => "generated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeature {
    pub feature: Vec<f64>,
    pub id: u32,
    pub camera: u16,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `(pc1, pc2)` per input row.
    pub coords: Vec<[f64; 2]>,
    /// Share of the total variance on the two leading components; zero when
    /// the inputs have no variance.
    pub variance_fraction: f64,
}

/// Project onto the two leading principal components of the centered data.
/// Each component's sign is fixed so its largest-magnitude loading is
/// positive.
pub fn pca_2d(rows: &[&[f64]]) -> Result<Projection, NumericsError> {
    if rows.len() < 2 {
        return Err(NumericsError::InvalidArgument(
            "projection needs at least two features".into(),
        ));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(NumericsError::InvalidArgument(
            "features must share a positive dimension".into(),
        ));
    }
    let n = rows.len();
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let m = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-m);
    }
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut comps = Vec::with_capacity(2);
    for &i in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.neg_mut();
        }
        comps.push((eig.eigenvalues[i].max(0.0), v));
    }
    while comps.len() < 2 {
        comps.push((0.0, nalgebra::DVector::zeros(d)));
    }
    let top = comps[0].0 + comps[1].0;
    let variance_fraction = if total > 0.0 { top / total } else { 0.0 };
    let p1 = &x * &comps[0].1;
    let p2 = &x * &comps[1].1;
    let coords = (0..n).map(|i| [p1[i], p2[i]]).collect();
    Ok(Projection {
        coords,
        variance_fraction,
    })
}

/// Write `pc1,pc2,id,camera,source` rows after a comment line carrying the
/// two-component variance fraction.
pub fn emit_projection(features: &[LabeledFeature], path: impl AsRef<Path>) -> Result<Projection> {
    let rows: Vec<&[f64]> = features.iter().map(|f| f.feature.as_slice()).collect();
    let proj = pca_2d(&rows)?;
    let mut s = String::new();
    let _ = writeln!(s, "# top2_variance_fraction={}", proj.variance_fraction);
    s.push_str("pc1,pc2,id,camera,source\n");
    for (f, c) in features.iter().zip(&proj.coords) {
        let _ = writeln!(s, "{},{},{},{},{}", c[0], c[1], f.id, f.camera, f.source.as_str());
    }
    let path = path.as_ref();
    fs::write(path, s).map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))?;
    Ok(proj)
}
