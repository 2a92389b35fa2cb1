//! Reverse-mode gradient accumulation over a single-owner operation tape.
//!
//! One training step records one tape: parameters are lifted in as leaves,
//! the forward pass pushes op nodes, and `backward` replays the recorded ops
//! once each in reverse order, accumulating gradients into every node whose
//! subgraph contains a tracked leaf and scattering leaf gradients back into
//! the owning [`ParamStore`].

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Named parameter with a persistent gradient buffer.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Flat, order-stable collection of model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Converts every parameter through f64 (gradients reset).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                })
                .collect(),
        }
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf {
        param: Option<usize>,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    MatmulNT {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    Softmax {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Gelu {
        x: NodeId,
    },
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Single-owner record of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Tracked leaf (gradients flow to it).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true, Op::Leaf { param: None })
    }

    /// Untracked input (masks, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, Op::Leaf { param: None })
    }

    /// Leaf bound to `store[pid]`; `backward` adds its gradient to the store.
    pub fn param(&mut self, store: &ParamStore<T>, pid: usize) -> NodeId {
        self.push(
            store.get(pid).value.clone(),
            true,
            Op::Leaf { param: Some(pid) },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Matmul { a, b }))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::MatmulNT { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::mul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let value = ops::scale(self.value(x), c);
        let rg = self.rg(x);
        self.push(value, rg, Op::Scale { x, c })
    }

    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let value = ops::softmax_last(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Softmax { x }))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let value = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, rg, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = ops::gelu(self.value(x));
        let rg = self.rg(x);
        self.push(value, rg, Op::Gelu { x })
    }

    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let value = ops::gather_rows(self.value(table), &indices)?;
        let rg = self.rg(table);
        Ok(self.push(value, rg, Op::Gather { table, indices }))
    }

    pub fn permute(&mut self, x: NodeId, perm: Vec<usize>) -> Result<NodeId> {
        let value = ops::permute(self.value(x), &perm)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Permute { x, perm }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(ops::sum_all(self.value(x)));
        let rg = self.rg(x);
        self.push(value, rg, Op::Sum { x })
    }

    /// Per-row NLL of `targets` under softmax of `logits` ([rows, vocab]).
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let value = ops::cross_entropy_rows(self.value(logits), &targets)?;
        let rg = self.rg(logits);
        Ok(self.push(value, rg, Op::CrossEntropy { logits, targets }))
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(node.value.shape(), delta.shape());
        match &mut node.grad {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += *dv;
                }
            }
            None => node.grad = Some(delta),
        }
        Ok(())
    }

    /// Populates gradients of `loss` w.r.t. every tracked node and adds
    /// leaf gradients into `store`. The tape itself clears node gradients at
    /// entry, so repeated calls accumulate additively in the store only.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = self.nodes[i].grad.take().expect("grad present");
            self.step_back(i, &grad)?;
            self.nodes[i].grad = Some(grad);
        }

        for node in &self.nodes {
            if let (Op::Leaf { param: Some(pid) }, Some(grad)) = (&node.op, &node.grad) {
                let p = store.get_mut(*pid);
                for (gv, dv) in p.grad.data_mut().iter_mut().zip(grad.data()) {
                    *gv += *dv;
                }
            }
        }
        Ok(())
    }

    /// Applies one op's local gradient rule, adding into parent grads.
    fn step_back(&mut self, id: usize, grad: &Tensor<T>) -> Result<()> {
        // Ops only reference earlier ids, so the reverse sweep is topological.
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let da = ops::matmul_nt(grad, self.value(b))?;
                    self.accumulate(a, da)?;
                }
                if self.rg(b) {
                    let collapse = self.value(b).rank() < self.value(a).rank();
                    let db = ops::matmul_tn(self.value(a), grad, collapse)?;
                    self.accumulate(b, db)?;
                }
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let da = ops::matmul(grad, self.value(b))?;
                    self.accumulate(a, da)?;
                }
                if self.rg(b) {
                    let collapse = self.value(b).rank() < self.value(a).rank();
                    let db = ops::matmul_tn(grad, self.value(a), collapse)?;
                    self.accumulate(b, db)?;
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    self.accumulate(a, grad.clone())?;
                }
                if self.rg(b) {
                    let bn = self.value(b).numel();
                    if bn == grad.numel() {
                        self.accumulate(b, grad.clone())?;
                    } else {
                        let mut folded = Tensor::zeros(self.value(b).shape());
                        for (i, &g) in grad.data().iter().enumerate() {
                            folded.data_mut()[i % bn] += g;
                        }
                        self.accumulate(b, folded)?;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let da = ops::mul(grad, self.value(b))?;
                    self.accumulate(a, da)?;
                }
                if self.rg(b) {
                    let db = ops::mul(grad, self.value(a))?;
                    self.accumulate(b, db)?;
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.rg(x) {
                    self.accumulate(x, ops::scale(grad, c))?;
                }
            }
            Op::Softmax { x } => {
                let x = *x;
                if self.rg(x) {
                    let y = &self.nodes[id].value;
                    let width = *y.shape().last().expect("softmax rank >= 1");
                    let mut dx = Tensor::zeros(y.shape());
                    for ((y_row, g_row), dx_row) in y
                        .data()
                        .chunks(width)
                        .zip(grad.data().chunks(width))
                        .zip(dx.data_mut().chunks_mut(width))
                    {
                        let mut dot = T::zero();
                        for (yv, gv) in y_row.iter().zip(g_row) {
                            dot += *yv * *gv;
                        }
                        for ((dv, yv), gv) in dx_row.iter_mut().zip(y_row).zip(g_row) {
                            *dv = *yv * (*gv - dot);
                        }
                    }
                    self.accumulate(x, dx)?;
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let width = *self.value(x).shape().last().expect("rank >= 1");
                let wt = T::from_f64(width as f64);
                let epst = T::from_f64(eps);
                let xv = self.value(x);
                let gv = self.value(gain);
                let rows = xv.numel() / width;

                let mut dx = Tensor::zeros(xv.shape());
                let mut dgain = Tensor::zeros(&[width]);
                let mut dbias = Tensor::zeros(&[width]);
                for r in 0..rows {
                    let x_row = &xv.data()[r * width..(r + 1) * width];
                    let g_row = &grad.data()[r * width..(r + 1) * width];
                    let mut mean = T::zero();
                    for v in x_row {
                        mean += *v;
                    }
                    mean = mean / wt;
                    let mut var = T::zero();
                    for v in x_row {
                        let d = *v - mean;
                        var += d * d;
                    }
                    var = var / wt;
                    let inv_sigma = T::one() / (var + epst).sqrt();

                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..width {
                        let xhat = (x_row[j] - mean) * inv_sigma;
                        let dxhat = g_row[j] * gv.data()[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain.data_mut()[j] += g_row[j] * xhat;
                        dbias.data_mut()[j] += g_row[j];
                    }
                    let mean_dxhat = sum_dxhat / wt;
                    let mean_dxhat_xhat = sum_dxhat_xhat / wt;
                    for j in 0..width {
                        let xhat = (x_row[j] - mean) * inv_sigma;
                        let dxhat = g_row[j] * gv.data()[j];
                        dx.data_mut()[r * width + j] =
                            (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_sigma;
                    }
                }
                if self.rg(x) {
                    self.accumulate(x, dx)?;
                }
                if self.rg(gain) {
                    self.accumulate(gain, dgain)?;
                }
                if self.rg(bias) {
                    self.accumulate(bias, dbias)?;
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if self.rg(x) {
                    let dx = ops::mul(grad, &ops::gelu_grad(self.value(x)))?;
                    self.accumulate(x, dx)?;
                }
            }
            Op::Gather { table, indices } => {
                let (table, indices) = (*table, indices.clone());
                if self.rg(table) {
                    let width = self.value(table).shape()[1];
                    let mut dt = Tensor::zeros(self.value(table).shape());
                    for (i, &row) in indices.iter().enumerate() {
                        let g_row = &grad.data()[i * width..(i + 1) * width];
                        let d_row = &mut dt.data_mut()[row * width..(row + 1) * width];
                        for (dv, gvv) in d_row.iter_mut().zip(g_row) {
                            *dv += *gvv;
                        }
                    }
                    self.accumulate(table, dt)?;
                }
            }
            Op::Permute { x, perm } => {
                let (x, perm) = (*x, perm.clone());
                if self.rg(x) {
                    let dx = ops::permute(grad, &ops::inverse_perm(&perm))?;
                    self.accumulate(x, dx)?;
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.rg(x) {
                    let dx = grad.reshaped(self.value(x).shape())?;
                    self.accumulate(x, dx)?;
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if self.rg(x) {
                    let g = grad.item()?;
                    self.accumulate(x, Tensor::full(self.value(x).shape(), g))?;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let (logits, targets) = (*logits, targets.clone());
                if self.rg(logits) {
                    let lv = self.value(logits);
                    let vocab = lv.shape()[1];
                    let mut dl = Tensor::zeros(lv.shape());
                    for (r, &t) in targets.iter().enumerate() {
                        let g = grad.data()[r];
                        let row = &lv.data()[r * vocab..(r + 1) * vocab];
                        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for &v in row {
                            sum += (v - max).exp();
                        }
                        let d_row = &mut dl.data_mut()[r * vocab..(r + 1) * vocab];
                        for (j, dv) in d_row.iter_mut().enumerate() {
                            let p = (row[j] - max).exp() / sum;
                            let indicator = if j == t { T::one() } else { T::zero() };
                            *dv = g * (p - indicator);
                        }
                    }
                    self.accumulate(logits, dl)?;
                }
            }
        }
        Ok(())
    }
}
