//! Named affine layers shared by the encoder and generator networks.

use rand::Rng;

use crate::error::NumericsError;
use crate::numerics::rng::glorot;
use crate::numerics::{NodeId, Tape, Tensor};

/// Uniform access to named parameter tensors.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        self.visit(prefix, &mut v);
        v
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        self.visit_mut(prefix, &mut v);
        v
    }

    fn num_values(&self) -> usize {
        self.named("").iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: glorot(rng, fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, tape: &mut Tape, name: &str, x: NodeId) -> Result<NodeId, NumericsError> {
        let w = tape.param_once(&join(name, "weight"), &self.weight);
        let b = tape.param_once(&join(name, "bias"), &self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// One tanh hidden layer followed by a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        Self {
            hidden: Linear::init(rng, fan_in, hidden),
            out: Linear::init(rng, hidden, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        Self {
            hidden: Linear::zeros(fan_in, hidden),
            out: Linear::zeros(hidden, fan_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, name: &str, x: NodeId) -> Result<NodeId, NumericsError> {
        let h = self.hidden.forward(tape, &join(name, "hidden"), x)?;
        let h = tape.tanh(h);
        self.out.forward(tape, &join(name, "out"), h)
    }
}

impl Params for Mlp {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.hidden.visit(&join(prefix, "hidden"), out);
        self.out.visit(&join(prefix, "out"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.hidden.visit_mut(&join(prefix, "hidden"), out);
        self.out.visit_mut(&join(prefix, "out"), out);
    }
}
