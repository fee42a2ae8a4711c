//! Dynamic reverse-mode tape over rank-2 tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive pushes one
//! node holding its forward value; [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a reverse topological order because a
//! node can only reference nodes created before it.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Input,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SubRow(NodeId, NodeId),
    ScaleBy(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Pow(NodeId, f64),
    Clamp(NodeId, f64, f64),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumSq(NodeId),
    RowSum(NodeId),
    ColMean(NodeId),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        floor: f64,
    },
    Reparam {
        mean: NodeId,
        logvar: NodeId,
        eps: Tensor,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Input => "input",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::SubRow(..) => "sub_row",
            Op::ScaleBy(..) => "scale_by",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Pow(..) => "pow",
            Op::Clamp(..) => "clamp",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumSq(..) => "sum_sq",
            Op::RowSum(..) => "row_sum",
            Op::ColMean(..) => "col_mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Reparam { .. } => "reparam",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    name: Option<String>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    named: BTreeMap<String, NodeId>,
    first_non_finite: Option<usize>,
}

/// Gradients of one scalar output with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    named: BTreeMap<String, NodeId>,
}

impl Gradients {
    /// Gradient w.r.t. `node`, or `None` if the output does not depend on it.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name).and_then(|&id| self.wrt(id))
    }

    /// Gradients of all named leaves (parameters and inputs). Leaves the
    /// output does not depend on get a zero tensor.
    pub fn named(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.named
            .iter()
            .map(|(name, &id)| {
                let g = self.wrt(id).cloned().unwrap_or_else(|| tape.value(id).zeros_like());
                (name.clone(), g)
            })
            .collect()
    }
}

fn mismatch(tape: &Tape, op: &str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch {
        node: format!("{op}#{}", tape.nodes.len()),
        detail,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Human-readable name of a node: its leaf name or `op#index`.
    pub fn node_name(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.name {
            Some(n) => n.clone(),
            None => format!("{}#{}", node.op.kind(), id.0),
        }
    }

    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.named.get(name).copied()
    }

    fn push(&mut self, value: Tensor, op: Op, name: Option<String>, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(id);
        }
        if let Some(n) = &name {
            self.named.insert(n.clone(), NodeId(id));
        }
        self.nodes.push(Node {
            value,
            op,
            name,
            requires_grad,
        });
        NodeId(id)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(value, op, None, rg)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn require_matrix(&self, op: &str, id: NodeId) -> Result<(), NumericsError> {
        if self.value(id).is_matrix() {
            Ok(())
        } else {
            Err(mismatch(
                self,
                op,
                format!("`{}` is not rank 2: {:?}", self.node_name(id), self.value(id).shape()),
            ))
        }
    }

    fn require_same(&self, op: &str, a: NodeId, b: NodeId) -> Result<(), NumericsError> {
        self.require_matrix(op, a)?;
        self.require_matrix(op, b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(
                self,
                op,
                format!(
                    "`{}` {:?} vs `{}` {:?}",
                    self.node_name(a),
                    self.value(a).shape(),
                    self.node_name(b),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    /// Trainable leaf. Names must be unique on a tape.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(value, Op::Param, Some(name.into()), true)
    }

    /// The parameter node registered under `name`, registering `value` on
    /// first use. Lets one set of weights feed several sub-graphs.
    pub fn param_once(&mut self, name: &str, value: &Tensor) -> NodeId {
        match self.named.get(name) {
            Some(&id) => id,
            None => self.param(name.to_string(), value.clone()),
        }
    }

    /// Differentiable named input (gradients are reported like parameters).
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(value, Op::Input, Some(name.into()), true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, None, false)
    }

    /// Copy of `id`'s value as a constant: gradient flow stops here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.require_matrix("matmul", a)?;
        self.require_matrix("matmul", b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(mismatch(
                self,
                "matmul",
                format!(
                    "`{}` {:?} x `{}` {:?}",
                    self.node_name(a),
                    va.shape(),
                    self.node_name(b),
                    vb.shape()
                ),
            ));
        }
        let v = va.matmul(vb);
        Ok(self.push_op(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.require_same("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.require_same("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_op(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.require_same("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    fn check_row(&self, op: &str, a: NodeId, row: NodeId) -> Result<(), NumericsError> {
        self.require_matrix(op, a)?;
        self.require_matrix(op, row)?;
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(mismatch(
                self,
                op,
                format!(
                    "row `{}` {:?} cannot broadcast over `{}` {:?}",
                    self.node_name(row),
                    vr.shape(),
                    self.node_name(a),
                    va.shape()
                ),
            ));
        }
        Ok(())
    }

    /// `a[i, :] + row[0, :]` for every row `i`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, NumericsError> {
        self.check_row("add_row", a, row)?;
        let v = broadcast_rows(self.value(a), self.value(row), |x, y| x + y);
        Ok(self.push_op(v, Op::AddRow(a, row), &[a, row]))
    }

    /// `a[i, :] - row[0, :]` for every row `i`.
    pub fn sub_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, NumericsError> {
        self.check_row("sub_row", a, row)?;
        let v = broadcast_rows(self.value(a), self.value(row), |x, y| x - y);
        Ok(self.push_op(v, Op::SubRow(a, row), &[a, row]))
    }

    /// Multiply every element of `a` by the `[1, 1]` node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, NumericsError> {
        self.require_matrix("scale_by", a)?;
        if self.value(s).len() != 1 {
            return Err(mismatch(
                self,
                "scale_by",
                format!("`{}` is not a scalar", self.node_name(s)),
            ));
        }
        let k = self.value(s).item();
        let v = self.value(a).map(|x| x * k);
        Ok(self.push_op(v, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push_op(v, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push_op(v, Op::AddConst(a), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push_op(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push_op(v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push_op(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push_op(v, Op::Log(a), &[a])
    }

    /// Square root; its derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push_op(v, Op::Sqrt(a), &[a])
    }

    pub fn pow(&mut self, a: NodeId, p: f64) -> NodeId {
        let v = self.value(a).map(|x| x.powf(p));
        self.push_op(v, Op::Pow(a, p), &[a])
    }

    /// Clamp to `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push_op(v, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(v, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push_op(v, Op::MeanAll(a), &[a])
    }

    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().map(|x| x * x).sum());
        self.push_op(v, Op::SumSq(a), &[a])
    }

    /// `[n, m] -> [n, 1]`.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.require_matrix("row_sum", a)?;
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let v = Tensor::from_rows(t.rows(), 1, data);
        Ok(self.push_op(v, Op::RowSum(a), &[a]))
    }

    /// `[n, m] -> [1, m]`.
    pub fn col_mean(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.require_matrix("col_mean", a)?;
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        let mut data = vec![0.0; m];
        for r in 0..n {
            for (acc, x) in data.iter_mut().zip(t.row_slice(r)) {
                *acc += x;
            }
        }
        for x in &mut data {
            *x /= n as f64;
        }
        let v = Tensor::from_rows(1, m, data);
        Ok(self.push_op(v, Op::ColMean(a), &[a]))
    }

    /// Horizontal concatenation of equal-height matrices.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(mismatch(self, "concat_cols", "no inputs".into()));
        }
        for &p in parts {
            self.require_matrix("concat_cols", p)?;
        }
        let n = self.value(parts[0]).rows();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != n) {
            return Err(mismatch(
                self,
                "concat_cols",
                format!(
                    "`{}` has {} rows, expected {n}",
                    self.node_name(bad),
                    self.value(bad).rows()
                ),
            ));
        }
        let m: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(n * m);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let v = Tensor::from_rows(n, m, data);
        Ok(self.push_op(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Select rows by index (embedding lookup, row repetition).
    pub fn gather_rows(&mut self, src: NodeId, index: &[usize]) -> Result<NodeId, NumericsError> {
        self.require_matrix("gather_rows", src)?;
        let t = self.value(src);
        if index.is_empty() {
            return Err(mismatch(self, "gather_rows", "empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows()) {
            return Err(mismatch(
                self,
                "gather_rows",
                format!(
                    "row {bad} out of range for `{}` with {} rows",
                    self.node_name(src),
                    t.rows()
                ),
            ));
        }
        let m = t.cols();
        let mut data = Vec::with_capacity(index.len() * m);
        for &i in index {
            data.extend_from_slice(t.row_slice(i));
        }
        let v = Tensor::from_rows(index.len(), m, data);
        Ok(self.push_op(v, Op::GatherRows(src, index.to_vec()), &[src]))
    }

    /// Mean over rows of `min(-log softmax(logits)[label], -ln floor)`.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize], floor: f64) -> Result<NodeId, NumericsError> {
        self.require_matrix("softmax_xent", logits)?;
        let t = self.value(logits);
        if labels.len() != t.rows() {
            return Err(mismatch(
                self,
                "softmax_xent",
                format!("{} labels for {} rows", labels.len(), t.rows()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= t.cols()) {
            return Err(mismatch(
                self,
                "softmax_xent",
                format!("label {bad} out of range for {} classes", t.cols()),
            ));
        }
        let cap = -floor.ln();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let lp = log_softmax(t.row_slice(r));
            total += (-lp[y]).min(cap);
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push_op(
            v,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                floor,
            },
            &[logits],
        ))
    }

    /// Reparameterized Gaussian sample `mean + exp(logvar / 2) * eps`, with
    /// `eps` held constant.
    pub fn reparam(&mut self, mean: NodeId, logvar: NodeId, eps: Tensor) -> Result<NodeId, NumericsError> {
        self.require_same("reparam", mean, logvar)?;
        if eps.shape() != self.value(mean).shape() {
            return Err(mismatch(
                self,
                "reparam",
                format!("noise {:?} vs mean {:?}", eps.shape(), self.value(mean).shape()),
            ));
        }
        let (m, lv) = (self.value(mean), self.value(logvar));
        let data = m
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((&mu, &l), &e)| mu + (0.5 * l).exp() * e)
            .collect();
        let v = Tensor::from_rows(m.rows(), m.cols(), data);
        Ok(self.push_op(v, Op::Reparam { mean, logvar, eps }, &[mean, logvar]))
    }

    /// First node whose forward value is non-finite, as an error.
    pub fn check_finite(&self) -> Result<(), NumericsError> {
        match self.first_non_finite {
            Some(i) => Err(NumericsError::NonFinite {
                node: self.node_name(NodeId(i)),
            }),
            None => Ok(()),
        }
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, NumericsError> {
        self.check_finite()?;
        if self.value(output).len() != 1 {
            return Err(NumericsError::ShapeMismatch {
                node: self.node_name(output),
                detail: format!("backward needs a scalar output, got {:?}", self.value(output).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(NumericsError::NonFinite {
                        node: format!("grad of {}", self.node_name(NodeId(i))),
                    });
                }
            }
        }
        Ok(Gradients {
            grads,
            named: self.named.clone(),
        })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |id: NodeId, delta: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Param | Op::Input | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, g.matmul(&vb.transpose()));
                }
                if self.rg(*b) {
                    acc(*b, va.transpose().matmul(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(vb, |x, y| x * y));
                acc(*b, g.zip_map(va, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, col_sums(g));
            }
            Op::SubRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, col_sums(g).map(|x| -x));
            }
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).item();
                acc(*a, g.map(|x| x * k));
                let dot: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                acc(*s, Tensor::scalar(dot));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 })),
            Op::Exp(a) => acc(*a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |x, v| x / v)),
            Op::Sqrt(a) => acc(*a, g.zip_map(out, |x, y| if y > 0.0 { x / (2.0 * y) } else { 0.0 })),
            Op::Pow(a, p) => acc(*a, g.zip_map(self.value(*a), |x, v| x * p * v.powf(p - 1.0))),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.zip_map(self.value(*a), |x, v| if v >= *lo && v <= *hi { x } else { 0.0 }),
            ),
            Op::SumAll(a) => {
                let k = g.item();
                acc(*a, self.value(*a).map(|_| k));
            }
            Op::MeanAll(a) => {
                let va = self.value(*a);
                let k = g.item() / va.len() as f64;
                acc(*a, va.map(|_| k));
            }
            Op::SumSq(a) => {
                let k = 2.0 * g.item();
                acc(*a, self.value(*a).map(|v| k * v));
            }
            Op::RowSum(a) => {
                let va = self.value(*a);
                let (n, m) = (va.rows(), va.cols());
                let mut data = Vec::with_capacity(n * m);
                for r in 0..n {
                    data.extend(std::iter::repeat_n(g.data()[r], m));
                }
                acc(*a, Tensor::from_rows(n, m, data));
            }
            Op::ColMean(a) => {
                let va = self.value(*a);
                let (n, m) = (va.rows(), va.cols());
                let scaled: Vec<f64> = g.data().iter().map(|x| x / n as f64).collect();
                let mut data = Vec::with_capacity(n * m);
                for _ in 0..n {
                    data.extend_from_slice(&scaled);
                }
                acc(*a, Tensor::from_rows(n, m, data));
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let m = self.value(p).cols();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(n * m);
                        for r in 0..n {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + m]);
                        }
                        acc(p, Tensor::from_rows(n, m, data));
                    }
                    offset += m;
                }
            }
            Op::GatherRows(src, index) => {
                let vs = self.value(*src);
                let m = vs.cols();
                let mut d = vs.zeros_like();
                for (r, &i) in index.iter().enumerate() {
                    let dst = &mut d.data_mut()[i * m..(i + 1) * m];
                    for (o, x) in dst.iter_mut().zip(g.row_slice(r)) {
                        *o += x;
                    }
                }
                acc(*src, d);
            }
            Op::SoftmaxXent { logits, labels, floor } => {
                let vl = self.value(*logits);
                let (n, m) = (vl.rows(), vl.cols());
                let cap = -floor.ln();
                let k = g.item() / n as f64;
                let mut data = vec![0.0; n * m];
                for (r, &y) in labels.iter().enumerate() {
                    let lp = log_softmax(vl.row_slice(r));
                    if -lp[y] > cap {
                        continue;
                    }
                    for c in 0..m {
                        let ind = if c == y { 1.0 } else { 0.0 };
                        data[r * m + c] = k * (lp[c].exp() - ind);
                    }
                }
                acc(*logits, Tensor::from_rows(n, m, data));
            }
            Op::Reparam { mean, logvar, eps } => {
                acc(*mean, g.clone());
                let lv = self.value(*logvar);
                let data = g
                    .data()
                    .iter()
                    .zip(lv.data())
                    .zip(eps.data())
                    .map(|((&x, &l), &e)| x * 0.5 * (0.5 * l).exp() * e)
                    .collect();
                acc(*logvar, Tensor::from_rows(lv.rows(), lv.cols(), data));
            }
        }
    }
}

fn broadcast_rows(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (n, m) = (a.rows(), a.cols());
    let r = row.data();
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        data.extend(a.row_slice(i).iter().zip(r).map(|(&x, &y)| f(x, y)));
    }
    Tensor::from_rows(n, m, data)
}

fn col_sums(g: &Tensor) -> Tensor {
    let m = g.cols();
    let mut data = vec![0.0; m];
    for r in 0..g.rows() {
        for (acc, x) in data.iter_mut().zip(g.row_slice(r)) {
            *acc += x;
        }
    }
    Tensor::from_rows(1, m, data)
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Build a graph over named differentiable inputs and differentiate its
/// scalar output with respect to each of them.
pub fn forward_backward<F>(
    inputs: &BTreeMap<String, Tensor>,
    build: F,
) -> Result<(Tensor, BTreeMap<String, Tensor>), NumericsError>
where
    F: FnOnce(&mut Tape, &BTreeMap<String, NodeId>) -> Result<NodeId, NumericsError>,
{
    let mut tape = Tape::new();
    let ids: BTreeMap<String, NodeId> = inputs
        .iter()
        .map(|(k, v)| (k.clone(), tape.input(k.clone(), v.clone())))
        .collect();
    let out = build(&mut tape, &ids)?;
    let grads = tape.backward(out)?;
    Ok((tape.value(out).clone(), grads.named(&tape)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: Vec<f64>) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::row(v))])
    }

    #[test]
    fn sum_of_squares_at_three() {
        let (out, g) = forward_backward(&one("x", vec![3.0]), |t, ids| Ok(t.sum_sq(ids["x"]))).unwrap();
        assert_eq!(out.item(), 9.0);
        assert_eq!(g["x"].data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (_, g) = forward_backward(&one("x", vec![0.3, -2.0, 5.0, 1.5]), |t, ids| Ok(t.sum(ids["x"]))).unwrap();
        assert_eq!(g["x"].data(), &[1.0; 4]);
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut t = Tape::new();
        let a = t.param("w", Tensor::zeros(2, 3));
        let b = t.param("x", Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("`w`"), "{msg}");
    }

    #[test]
    fn non_finite_is_reported() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::row(vec![-1.0]));
        let l = t.log(x);
        let s = t.sum(l);
        match t.backward(s) {
            Err(NumericsError::NonFinite { node }) => assert_eq!(node, "log#1"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::row(vec![2.0]));
        let d = t.detach(x);
        let p = t.mul(x, d).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.by_name("x").unwrap().data(), &[2.0]);
    }

    #[test]
    fn repeated_input_accumulates() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::row(vec![3.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        assert_eq!(t.backward(s).unwrap().by_name("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn xent_floor_caps_loss() {
        let mut t = Tape::new();
        let z = t.param("z", Tensor::row(vec![0.0, 100.0]));
        let l = t.softmax_xent(z, &[0], 1e-12).unwrap();
        assert!((t.value(l).item() - (-(1e-12f64).ln())).abs() < 1e-12);
        let g = t.backward(l).unwrap();
        assert_eq!(g.by_name("z").unwrap().data(), &[0.0, 0.0]);
    }
}
