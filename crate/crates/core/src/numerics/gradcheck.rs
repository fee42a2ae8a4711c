//! Central finite-difference gradient checking.

use rayon::prelude::*;

use crate::error::NumericsError;

/// A scalar function with an analytic gradient.
pub trait Differentiable: Sync {
    fn value(&self, x: &[f64]) -> Result<f64, NumericsError>;
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), NumericsError>;
}

/// Wraps a pair of closures as a [`Differentiable`].
pub struct FnPair<V, G> {
    pub value: V,
    pub grad: G,
}

impl<V, G> Differentiable for FnPair<V, G>
where
    V: Fn(&[f64]) -> Result<f64, NumericsError> + Sync,
    G: Fn(&[f64]) -> Result<(f64, Vec<f64>), NumericsError> + Sync,
{
    fn value(&self, x: &[f64]) -> Result<f64, NumericsError> {
        (self.value)(x)
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), NumericsError> {
        (self.grad)(x)
    }
}

/// Central-difference estimate of `df/dx_i`.
pub fn central_difference<F: Differentiable + ?Sized>(
    f: &F,
    point: &[f64],
    coord: usize,
    h: f64,
) -> Result<f64, NumericsError> {
    let mut x = point.to_vec();
    x[coord] = point[coord] + h;
    let up = f.value(&x)?;
    x[coord] = point[coord] - h;
    let down = f.value(&x)?;
    if !up.is_finite() || !down.is_finite() {
        return Err(NumericsError::NonFiniteProbe { coordinate: coord });
    }
    Ok((up - down) / (2.0 * h))
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F: Differentiable + ?Sized>(f: &F, point: &[f64], h: f64) -> Result<f64, NumericsError> {
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, h, &coords)
}

/// [`grad_check`] restricted to `coords`.
pub fn grad_check_coords<F: Differentiable + ?Sized>(
    f: &F,
    point: &[f64],
    h: f64,
    coords: &[usize],
) -> Result<f64, NumericsError> {
    if !(h > 0.0 && h <= 1e-2) {
        return Err(NumericsError::InvalidArgument(format!("step h={h} outside (0, 1e-2]")));
    }
    let (_, analytic) = f.value_and_grad(point)?;
    if analytic.len() != point.len() {
        return Err(NumericsError::InvalidArgument(format!(
            "gradient has {} entries for a {}-dim point",
            analytic.len(),
            point.len()
        )));
    }
    coords
        .par_iter()
        .map(|&i| {
            let numeric = central_difference(f, point, i, h)?;
            Ok((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0))
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
}
