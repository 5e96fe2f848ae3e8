use super::ops::{self, LayerNormCache};
use super::param::{ParamId, ParamStore};
use super::{Axis, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: u64, id: ParamId },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Option<Var>, dilation: usize, axis: Axis },
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var, Axis),
    LayerNorm { x: Var, gain: Var, shift: Var, cache: LayerNormCache },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    AddScaled { a: Var, b: Var, s1: f64, s2: f64 },
    Mix { prev: Var, proj: Var, gate: Var },
    Matmul { a: Var, b: Var, ta: bool, tb: bool, scale: f64 },
    Bce { pred: Var, target: Tensor, weights: Option<Tensor> },
    Sum(Var),
    Dot(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use tape: record a forward pass, then call [`Graph::backward`].
///
/// Nodes that do not depend on any trainable parameter or gradient-tracked
/// input are skipped in the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked, e.g. the input of a gradient check.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A parameter leaf. Gradients flow to it only when it is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(
            p.tensor.clone(),
            Op::Param {
                store: store.id(),
                id,
            },
            p.trainable,
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize, axis: Axis) -> Result<Var> {
        let y = ops::conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)), dilation, axis)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Conv { x, w, b, dilation, axis }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let y = ops::softmax(self.value(x), axis);
        let rg = self.rg(x);
        self.push(y, Op::Softmax(x, axis), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (y, cache) = ops::layer_norm(self.value(x), self.value(gain), self.value(shift))?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(y, Op::LayerNorm { x, gain, shift, cache }, rg))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat(&vals)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(y, Op::Concat(xs.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_channels(self.value(x), start, len)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Slice { x, start }, rg))
    }

    pub fn add_scaled(&mut self, a: Var, b: Var, s1: f64, s2: f64) -> Result<Var> {
        let y = ops::add_scaled(self.value(a), self.value(b), s1, s2)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::AddScaled { a, b, s1, s2 }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_scaled(a, b, 1.0, 1.0)
    }

    /// Gated convex combination `mu * prev + (1 - mu) * proj` with
    /// `mu = sigmoid(gate)`, `gate` a `(1, 1, 1)` scalar.
    pub fn mix(&mut self, prev: Var, proj: Var, gate: Var) -> Result<Var> {
        if self.shape(gate) != Shape::scalar() {
            return Err(Error::invalid("mix: gate must be a scalar"));
        }
        let mu = ops::sigmoid_scalar(self.value(gate).data()[0]);
        let y = ops::add_scaled(self.value(prev), self.value(proj), mu, 1.0 - mu)?;
        let rg = self.rg(prev) || self.rg(proj) || self.rg(gate);
        Ok(self.push(y, Op::Mix { prev, proj, gate }, rg))
    }

    /// Per-batch `scale * op(a) * op(b)`.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool, scale: f64) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b), ta, tb, scale)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Matmul { a, b, ta, tb, scale }, rg))
    }

    /// Scalar binary cross-entropy against a fixed target.
    pub fn bce(&mut self, pred: Var, target: Tensor, weights: Option<Tensor>) -> Result<Var> {
        let loss = ops::bce_loss(self.value(pred), &target, weights.as_ref())?;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, target, weights }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Scalar `sum(x * c)` for a fixed `c`.
    pub fn dot(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::invalid("dot: shape mismatch"));
        }
        let s = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, c), rg))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::invalid("backward: loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { store, id } if n.requires_grad => Some((Var(i), store, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, g: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            &Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(self.value(x), self.value(w), dy, self.rg(x));
                if let Some(dx) = dx {
                    acc(x, dx);
                }
                acc(w, dw);
                if let Some(b) = b {
                    acc(b, db);
                }
            }
            &Op::Conv { x, w, b, dilation, axis } => {
                let (dx, dw, db) =
                    ops::conv1d_backward(self.value(x), self.value(w), dy, dilation, axis, self.rg(x));
                if let Some(dx) = dx {
                    acc(x, dx);
                }
                acc(w, dw);
                if let Some(b) = b {
                    acc(b, db);
                }
            }
            &Op::Sigmoid(x) => acc(x, ops::sigmoid_backward(&node.value, dy)),
            &Op::Relu(x) => acc(x, ops::relu_backward(self.value(x), dy)),
            &Op::Softmax(x, axis) => acc(x, ops::softmax_backward(&node.value, dy, axis)),
            Op::LayerNorm { x, gain, shift, cache } => {
                let (dx, dg, ds) = ops::layer_norm_backward(cache, self.value(*gain), dy);
                acc(*x, dx);
                acc(*gain, dg);
                acc(*shift, ds);
            }
            Op::Concat(xs) => {
                let sizes: Vec<usize> = xs.iter().map(|&v| self.shape(v).c).collect();
                let parts = ops::split_channels(dy, &sizes).expect("concat grad shape");
                for (&v, g) in xs.iter().zip(parts) {
                    acc(v, g);
                }
            }
            &Op::Slice { x, start } => {
                let xs = self.shape(x);
                let mut g = Tensor::zeros(xs);
                let len = dy.shape().c;
                for b in 0..xs.b {
                    let lo = g.index(b, start, 0);
                    g.data_mut()[lo..lo + len * xs.t].copy_from_slice(dy.batch(b));
                }
                acc(x, g);
            }
            &Op::AddScaled { a, b, s1, s2 } => {
                acc(a, dy.map(|v| v * s1));
                acc(b, dy.map(|v| v * s2));
            }
            &Op::Mix { prev, proj, gate } => {
                let mu = ops::sigmoid_scalar(self.value(gate).data()[0]);
                acc(prev, dy.map(|v| v * mu));
                acc(proj, dy.map(|v| v * (1.0 - mu)));
                let dmu: f64 = dy
                    .data()
                    .iter()
                    .zip(self.value(prev).data().iter().zip(self.value(proj).data()))
                    .map(|(g, (p, q))| g * (p - q))
                    .sum();
                acc(gate, Tensor::scalar(dmu * mu * (1.0 - mu)));
            }
            &Op::Matmul { a, b, ta, tb, scale } => {
                let (da, db) = ops::matmul_backward(
                    self.value(a),
                    self.value(b),
                    ta,
                    tb,
                    scale,
                    dy,
                    (self.rg(a), self.rg(b)),
                );
                if let Some(da) = da {
                    acc(a, da);
                }
                if let Some(db) = db {
                    acc(b, db);
                }
            }
            Op::Bce { pred, target, weights } => {
                let g = ops::bce_backward(self.value(*pred), target, weights.as_ref(), dy.data()[0]);
                acc(*pred, g);
            }
            &Op::Sum(x) => acc(x, Tensor::full(self.shape(x), dy.data()[0])),
            Op::Dot(x, c) => {
                let s = dy.data()[0];
                acc(*x, c.map(|v| v * s));
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, u64, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of `store`, summed over all uses.
    /// Parameters the loss did not reach get `None`.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; store.len()];
        for &(var, sid, id) in &self.params {
            if sid != store.id() {
                continue;
            }
            if let Some(g) = self.wrt(var) {
                match &mut out[id.index()] {
                    Some(existing) => existing.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}
