//! The joint objective as a function of one parameter group, for
//! finite-difference checks of gradients and of the detachment contract.
//!
//! Perturbed evaluations hold the two detached edges (the generator's copy
//! of `f̄` and the CCFA targets) at their values from the base point, so the
//! probed function is exactly the surrogate the tape differentiates.

use super::{joint_forward, joint_forward_held, Batch, Held, Networks, TrainConfig};
use crate::error::NumericsError;
use crate::generator::{IfnState, StepNoise};
use crate::layers::Params;
use crate::numerics::{Differentiable, Tensor};

/// Which scalar of the joint forward pass to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// The full joint loss.
    Total,
    /// `α·L_EST + (1 − α)·L_GSNN`.
    Generator,
    /// Unweighted `L_CCFA`.
    Ccfa,
}

/// Parameters whose name starts with `group` (`"enc."`, `"cls."`, `"gen."`,
/// or `""` for all) flattened in name order; everything else is held fixed.
pub struct JointProbe<'a> {
    nets: &'a Networks,
    ifn: Option<&'a IfnState>,
    batch: &'a Batch,
    cfg: &'a TrainConfig,
    noise: &'a StepNoise,
    objective: Objective,
    group: String,
    held: Option<Held>,
}

impl<'a> JointProbe<'a> {
    pub fn new(
        nets: &'a Networks,
        ifn: Option<&'a IfnState>,
        batch: &'a Batch,
        cfg: &'a TrainConfig,
        noise: &'a StepNoise,
        objective: Objective,
        group: &str,
    ) -> Result<Self, NumericsError> {
        let held = joint_forward(nets, ifn, batch, cfg, noise)?.held();
        if objective != Objective::Total && held.is_none() {
            return Err(NumericsError::InvalidArgument("objective needs a generator".into()));
        }
        Ok(Self {
            nets,
            ifn,
            batch,
            cfg,
            noise,
            objective,
            group: group.to_string(),
            held,
        })
    }

    fn selected<'t>(&self, named: Vec<(String, &'t Tensor)>) -> Vec<(String, &'t Tensor)> {
        let mut v: Vec<_> = named.into_iter().filter(|(n, _)| n.starts_with(&self.group)).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn names(&self) -> Vec<String> {
        self.selected(self.nets.named("")).into_iter().map(|(n, _)| n).collect()
    }

    /// Current values of the probed group.
    pub fn point(&self) -> Vec<f64> {
        self.selected(self.nets.named(""))
            .into_iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect()
    }

    pub fn with_point(&self, x: &[f64]) -> Result<Networks, NumericsError> {
        let mut nets = self.nets.clone();
        let mut slots: Vec<_> = nets
            .named_mut("")
            .into_iter()
            .filter(|(n, _)| n.starts_with(&self.group))
            .collect();
        slots.sort_by(|a, b| a.0.cmp(&b.0));
        let total: usize = slots.iter().map(|(_, t)| t.len()).sum();
        if total != x.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "point has {} values, group `{}` has {total}",
                x.len(),
                self.group
            )));
        }
        let mut off = 0;
        for (_, t) in slots {
            let n = t.len();
            *t = Tensor::from_rows(t.rows(), t.cols(), x[off..off + n].to_vec());
            off += n;
        }
        Ok(nets)
    }

    fn value_and_grad_inner(&self, x: &[f64], grad: bool) -> Result<(f64, Vec<f64>), NumericsError> {
        let nets = self.with_point(x)?;
        let fwd = joint_forward_held(&nets, self.ifn, self.batch, self.cfg, self.noise, self.held.as_ref())?;
        let missing = || NumericsError::InvalidArgument("objective needs a generator".into());
        let out = match self.objective {
            Objective::Total => fwd.total,
            Objective::Generator => fwd.generator_total.ok_or_else(missing)?,
            Objective::Ccfa => fwd.ccfa.ok_or_else(missing)?,
        };
        let value = fwd.tape.value(out).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = fwd.tape.backward(out)?;
        let mut g = Vec::with_capacity(x.len());
        for (name, t) in self.selected(nets.named("")) {
            match grads.by_name(&name) {
                Some(d) => g.extend_from_slice(d.data()),
                None => g.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        Ok((value, g))
    }
}

impl Differentiable for JointProbe<'_> {
    fn value(&self, x: &[f64]) -> Result<f64, NumericsError> {
        self.value_and_grad_inner(x, false).map(|(v, _)| v)
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), NumericsError> {
        self.value_and_grad_inner(x, true)
    }
}
