//! Feature encoder `E` and the identity classifier head.

use rand::Rng;

use crate::error::NumericsError;
use crate::layers::{join, Linear, Mlp, Params};
use crate::numerics::{log_softmax, NodeId, Tape, Tensor};

/// `d_img -> hidden (tanh) -> d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub mlp: Mlp,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, img_dim: usize, hidden: usize, feat_dim: usize) -> Self {
        Self {
            mlp: Mlp::init(rng, img_dim, hidden, feat_dim),
        }
    }

    pub fn zeros(img_dim: usize, hidden: usize, feat_dim: usize) -> Self {
        Self {
            mlp: Mlp::zeros(img_dim, hidden, feat_dim),
        }
    }

    pub fn img_dim(&self) -> usize {
        self.mlp.hidden.fan_in()
    }

    pub fn feat_dim(&self) -> usize {
        self.mlp.out.fan_out()
    }

    /// Encode a `[n, d_img]` batch on the tape.
    pub fn encode(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, NumericsError> {
        let cols = tape.value(x).cols();
        if cols != self.img_dim() {
            return Err(NumericsError::ShapeMismatch {
                node: tape.node_name(x),
                detail: format!("encoder expects {} input columns, got {cols}", self.img_dim()),
            });
        }
        self.mlp.forward(tape, "enc", x)
    }

    /// Encode without recording gradients anywhere the caller can see.
    pub fn encode_values(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let f = self.encode(&mut tape, xi)?;
        Ok(tape.value(f).clone())
    }
}

impl Params for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.mlp.visit(&join(prefix, "enc"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.mlp.visit_mut(&join(prefix, "enc"), out);
    }
}

/// Linear softmax classifier over the current training label space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub linear: Linear,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, feat_dim: usize, num_labels: usize) -> Self {
        Self {
            linear: Linear::init(rng, feat_dim, num_labels),
        }
    }

    pub fn zeros(feat_dim: usize, num_labels: usize) -> Self {
        Self {
            linear: Linear::zeros(feat_dim, num_labels),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.linear.fan_out()
    }

    pub fn logits(&self, tape: &mut Tape, fbar: NodeId) -> Result<NodeId, NumericsError> {
        self.linear.forward(tape, "cls", fbar)
    }

    /// Class probabilities for one normalized feature.
    pub fn classify(&self, fbar: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if fbar.len() != self.linear.fan_in() {
            return Err(NumericsError::ShapeMismatch {
                node: "cls".into(),
                detail: format!("expected {} features, got {}", self.linear.fan_in(), fbar.len()),
            });
        }
        let logits = Tensor::row(fbar.to_vec())
            .matmul(&self.linear.weight)
            .zip_map(&self.linear.bias, |a, b| a + b);
        Ok(log_softmax(logits.data()).into_iter().map(f64::exp).collect())
    }
}

impl Params for ClassifierParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.linear.visit(&join(prefix, "cls"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.linear.visit_mut(&join(prefix, "cls"), out);
    }
}
