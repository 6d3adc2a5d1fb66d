//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Tape::backward`] replays it once from the loss down to the first node.

use std::collections::{HashMap, HashSet};

use crate::error::{shape_err, Result, TensorError};
use crate::ops::conv::{self, ConvSpec};
use crate::ops::norm::{self, BatchNormSaved};
use crate::ops::pool::{self, Axis, Reduce};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    /// Elements per channel that produced the statistics.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, saved: BatchNormSaved<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
    Reduce { x: Var, axis: Axis, op: Reduce, argmax: Vec<u32> },
    Concat(Var, Var),
    SliceChannels { x: Var, start: usize },
    Add(Var, Var),
    Mul(Var, Var),
    MulBroadcast { x: Var, g: Var },
    Scale(Var, T),
    MulConst { x: Var, c: Tensor<T> },
    Sum(Var),
    Mse(Var, Var),
    SqDistConst { x: Var, target: Tensor<T>, scale: T },
    GatherRows { table: Var, indices: Vec<usize> },
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass and its gradients.
///
/// A tape belongs to a single training step or inference call; build a fresh
/// one per step.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: HashMap<usize, Tensor<T>>,
    retained: HashSet<usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: HashMap::new(), retained: HashSet::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keep the gradient of an interior node after [`Tape::backward`].
    pub fn retain_grad(&mut self, v: Var) {
        self.retained.insert(v.0);
    }

    /// Accumulated gradient of a leaf or retained node.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.0)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn expect_same_shape(&self, a: Var, b: Var, what: &str) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(format!("{what}: shapes {sa} and {sb} differ"));
        }
        Ok(sa)
    }

    // ----- ops -----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, &inputs))
    }

    /// Normalize with batch statistics. The caller owns running statistics
    /// and updates them from the returned [`BatchStats`].
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let c = self.check_bn(x, gamma, beta)?;
        let count = self.value(x).numel() / c;
        let (value, saved) = norm::forward_train(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps);
        let stats = BatchStats { mean: saved.mean.clone(), var: saved.var.clone(), count };
        let v = self.push(value, Op::BatchNormTrain { x, gamma, beta, saved }, &[x, gamma, beta]);
        Ok((v, stats))
    }

    /// Normalize with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let c = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batch_norm_eval: running statistics length mismatch");
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let value = norm::forward_eval(self.value(x), self.value(gamma).data(), self.value(beta).data(), &mean, &inv_std);
        Ok(self.push(value, Op::BatchNormEval { x, gamma, beta, mean, inv_std }, &[x, gamma, beta]))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = self.shape(x).channels();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err(format!("batch norm over {} channels needs {c} scale/shift values", c));
        }
        Ok(c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let src = self.value(x);
        Tensor::from_vec(src.shape(), src.data().iter().map(|&v| f(v)).collect()).expect("map shape")
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (value, argmax) = pool::max_pool2(self.value(x))?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// ×2 bilinear upsampling with half-pixel centres.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let value = pool::upsample2(self.value(x));
        self.push(value, Op::Upsample2(x), &[x])
    }

    pub fn reduce(&mut self, x: Var, axis: Axis, op: Reduce) -> Var {
        let (value, argmax) = pool::reduce(self.value(x), axis, op);
        self.push(value, Op::Reduce { x, axis, op, argmax }, &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.batch() != sb.batch() || sa.height() != sb.height() || sa.width() != sb.width() {
            return shape_err(format!("concat_channels: {sa} and {sb} differ outside channels"));
        }
        let [bn, ca, h, w] = sa.0;
        let cb = sb.channels();
        let plane = h * w;
        let mut data = Vec::with_capacity(bn * (ca + cb) * plane);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for ib in 0..bn {
            data.extend_from_slice(&da[ib * ca * plane..(ib + 1) * ca * plane]);
            data.extend_from_slice(&db[ib * cb * plane..(ib + 1) * cb * plane]);
        }
        let value = Tensor::from_vec(Shape::new(bn, ca + cb, h, w), data)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [bn, c, h, w] = self.shape(x).0;
        if start + len > c || len == 0 {
            return shape_err(format!("slice_channels {start}+{len} out of {c} channels"));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(bn * len * plane);
        for ib in 0..bn {
            let off = (ib * c + start) * plane;
            data.extend_from_slice(&src[off..off + len * plane]);
        }
        let value = Tensor::from_vec(Shape::new(bn, len, h, w), data)?;
        Ok(self.push(value, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.expect_same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.expect_same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Mul(a, b), &[a, b]))
    }

    /// `x ⊙ g` where every dim of `g` is either 1 or equal to the dim of `x`.
    pub fn mul_broadcast(&mut self, x: Var, g: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(g));
        let strides = broadcast_strides(sx, sg)?;
        let (dx, dg) = (self.value(x).data(), self.value(g).data());
        let mut data = Vec::with_capacity(sx.numel());
        for_each_broadcast(sx, strides, |i, j| data.push(dx[i] * dg[j]));
        Ok(self.push(Tensor::from_vec(sx, data)?, Op::MulBroadcast { x, g }, &[x, g]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.map(x, |v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let shape = self.shape(x);
        if c.shape() != shape {
            return shape_err(format!("mul_const: {} vs {}", shape, c.shape()));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::MulConst { x, c }, &[x]))
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of_f64(n as f64))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.expect_same_shape(pred, target, "mse")?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = T::of_f64(p.numel() as f64);
        let total: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(self.push(Tensor::scalar(total / n), Op::Mse(pred, target), &[pred, target]))
    }

    /// `scale · Σ (x − target)²` with `target` held constant.
    pub fn sq_dist_const(&mut self, x: Var, target: Tensor<T>, scale: T) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return shape_err(format!("sq_dist_const: {} vs {}", self.shape(x), target.shape()));
        }
        let total: T = self.value(x).data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(self.push(Tensor::scalar(scale * total), Op::SqDistConst { x, target, scale }, &[x]))
    }

    /// Embed rows of `table` (shape `(K, D, 1, 1)`) into a `(B, D, H, W)`
    /// map; `indices` lists one row per `(b, h, w)` in row-major order.
    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>, (b, h, w): (usize, usize, usize)) -> Result<Var> {
        let [k, d, th, tw] = self.shape(table).0;
        if th != 1 || tw != 1 {
            return shape_err(format!("gather_rows table must be (K, D, 1, 1), got {}", self.shape(table)));
        }
        if indices.len() != b * h * w {
            return shape_err(format!("gather_rows: {} indices for {b}x{h}x{w}", indices.len()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return shape_err(format!("gather_rows: index {bad} out of {k} rows"));
        }
        let rows = self.value(table).data();
        let plane = h * w;
        let mut data = vec![T::zero(); b * d * plane];
        for (n, &row) in indices.iter().enumerate() {
            let (ib, p) = (n / plane, n % plane);
            for ch in 0..d {
                data[(ib * d + ch) * plane + p] = rows[row * d + ch];
            }
        }
        let value = Tensor::from_vec(Shape::new(b, d, h, w), data)?;
        Ok(self.push(value, Op::GatherRows { table, indices }, &[table]))
    }

    /// Emits `value` forward while passing the output gradient to `x`
    /// unchanged (straight-through estimator).
    pub fn straight_through(&mut self, x: Var, value: Tensor<T>) -> Result<Var> {
        if value.shape() != self.shape(x) {
            return shape_err(format!("straight_through: {} vs {}", value.shape(), self.shape(x)));
        }
        Ok(self.push(value, Op::StraightThrough(x), &[x]))
    }

    // ----- backward -----

    /// Back-propagate from a scalar `loss`, accumulating into the gradients of
    /// every leaf that requires them (and every retained node). Calling it
    /// twice without [`Tape::zero_grad`] adds the gradients twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss).numel() != 1 {
            return Err(TensorError::Usage(format!("backward needs a scalar loss, got {}", self.shape(loss))));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Usage("loss does not depend on any differentiable leaf".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || self.retained.contains(&id) {
                let shape = node.value.shape();
                match self.grads.get_mut(&id) {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &v)| *a = *a + v),
                    None => {
                        self.grads.insert(id, Tensor::from_vec(shape, g.clone())?);
                    }
                }
            }
            backward_node(&self.nodes, id, &g, &mut grads)?;
        }
        Ok(())
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn broadcast_strides(sx: Shape, sg: Shape) -> Result<[usize; 4]> {
    let mut strides = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        let (nx, ng) = (sx.0[d], sg.0[d]);
        if ng == nx {
            strides[d] = acc;
        } else if ng == 1 {
            strides[d] = 0;
        } else {
            return shape_err(format!("cannot broadcast {sg} onto {sx}"));
        }
        acc *= ng;
    }
    Ok(strides)
}

/// Calls `f(flat index in x, flat index in g)` for every element of `x`.
fn for_each_broadcast(sx: Shape, strides: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let [b, c, h, w] = sx.0;
    let mut i = 0;
    for ib in 0..b {
        for ic in 0..c {
            let base_bc = ib * strides[0] + ic * strides[1];
            for ih in 0..h {
                let base = base_bc + ih * strides[2];
                for iw in 0..w {
                    f(i, base + iw * strides[3]);
                    i += 1;
                }
            }
        }
    }
}

/// Grad buffer for `v`, allocated on first use, or `None` when `v` is constant.
fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn add_into<T: Real>(dst: Option<&mut Vec<T>>, src: impl IntoIterator<Item = T>) {
    if let Some(dst) = dst {
        dst.iter_mut().zip(src).for_each(|(a, v)| *a = *a + v);
    }
}

fn backward_node<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
    let node = &nodes[id];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, spec } => {
            // Take buffers out to satisfy the borrow checker, then put them back.
            let mut gx = slot(nodes, grads, *x).map(std::mem::take);
            let mut gw = slot(nodes, grads, *w).map(std::mem::take);
            let mut gb = b.and_then(|b| slot(nodes, grads, b).map(std::mem::take));
            conv::backward(val(*x), val(*w), *spec, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut())?;
            restore(grads, *x, gx);
            restore(grads, *w, gw);
            if let Some(b) = b {
                restore(grads, *b, gb);
            }
        }
        Op::BatchNormTrain { x, gamma, beta, saved } => {
            let mut gx = slot(nodes, grads, *x).map(std::mem::take);
            let mut gg = slot(nodes, grads, *gamma).map(std::mem::take);
            let mut gb = slot(nodes, grads, *beta).map(std::mem::take);
            norm::backward_train(val(*x), saved, val(*gamma).data(), g, gx.as_deref_mut(), gg.as_deref_mut(), gb.as_deref_mut());
            restore(grads, *x, gx);
            restore(grads, *gamma, gg);
            restore(grads, *beta, gb);
        }
        Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
            let mut gx = slot(nodes, grads, *x).map(std::mem::take);
            let mut gg = slot(nodes, grads, *gamma).map(std::mem::take);
            let mut gb = slot(nodes, grads, *beta).map(std::mem::take);
            norm::backward_eval(val(*x), val(*gamma).data(), mean, inv_std, g, gx.as_deref_mut(), gg.as_deref_mut(), gb.as_deref_mut());
            restore(grads, *x, gx);
            restore(grads, *gamma, gg);
            restore(grads, *beta, gb);
        }
        Op::Relu(x) => {
            let xs = val(*x).data();
            add_into(slot(nodes, grads, *x), g.iter().zip(xs).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }));
        }
        Op::Sigmoid(x) => {
            let ys = node.value.data();
            add_into(slot(nodes, grads, *x), g.iter().zip(ys).map(|(&g, &y)| g * y * (T::one() - y)));
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (&i, &gv) in argmax.iter().zip(g) {
                    gx[i as usize] = gx[i as usize] + gv;
                }
            }
        }
        Op::Upsample2(x) => {
            let shape = val(*x).shape();
            if let Some(gx) = slot(nodes, grads, *x) {
                pool::upsample2_backward(shape, g, gx);
            }
        }
        Op::Reduce { x, axis, op, argmax } => {
            let shape = val(*x).shape();
            if let Some(gx) = slot(nodes, grads, *x) {
                pool::reduce_backward(shape, *axis, *op, argmax, g, gx);
            }
        }
        Op::Concat(a, b) => {
            let [bn, ca, h, w] = val(*a).shape().0;
            let cb = val(*b).shape().channels();
            let plane = h * w;
            let c = ca + cb;
            if let Some(ga) = slot(nodes, grads, *a) {
                for ib in 0..bn {
                    let src = &g[ib * c * plane..(ib * c + ca) * plane];
                    for (d, &s) in ga[ib * ca * plane..(ib + 1) * ca * plane].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ib in 0..bn {
                    let src = &g[(ib * c + ca) * plane..(ib + 1) * c * plane];
                    for (d, &s) in gb[ib * cb * plane..(ib + 1) * cb * plane].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
        Op::SliceChannels { x, start } => {
            let [bn, c, h, w] = val(*x).shape().0;
            let len = node.value.shape().channels();
            let plane = h * w;
            if let Some(gx) = slot(nodes, grads, *x) {
                for ib in 0..bn {
                    let off = (ib * c + start) * plane;
                    let src = &g[ib * len * plane..(ib + 1) * len * plane];
                    for (d, &s) in gx[off..off + len * plane].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
        Op::Add(a, b) => {
            add_into(slot(nodes, grads, *a), g.iter().copied());
            add_into(slot(nodes, grads, *b), g.iter().copied());
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(*a).data(), val(*b).data());
            add_into(slot(nodes, grads, *a), g.iter().zip(db).map(|(&g, &v)| g * v));
            add_into(slot(nodes, grads, *b), g.iter().zip(da).map(|(&g, &v)| g * v));
        }
        Op::MulBroadcast { x, g: gate } => {
            let (sx, sg) = (val(*x).shape(), val(*gate).shape());
            let strides = broadcast_strides(sx, sg)?;
            let (dx, dg) = (val(*x).data(), val(*gate).data());
            if let Some(gx) = slot(nodes, grads, *x) {
                for_each_broadcast(sx, strides, |i, j| gx[i] = gx[i] + g[i] * dg[j]);
            }
            if let Some(gg) = slot(nodes, grads, *gate) {
                for_each_broadcast(sx, strides, |i, j| gg[j] = gg[j] + g[i] * dx[i]);
            }
        }
        Op::Scale(x, factor) => {
            add_into(slot(nodes, grads, *x), g.iter().map(|&v| v * *factor));
        }
        Op::MulConst { x, c } => {
            add_into(slot(nodes, grads, *x), g.iter().zip(c.data()).map(|(&g, &c)| g * c));
        }
        Op::Sum(x) => {
            let g0 = g[0];
            add_into(slot(nodes, grads, *x), std::iter::repeat(g0));
        }
        Op::Mse(p, t) => {
            let (dp, dt) = (val(*p).data(), val(*t).data());
            let k = g[0] * T::of_f64(2.0) / T::of_f64(dp.len() as f64);
            add_into(slot(nodes, grads, *p), dp.iter().zip(dt).map(|(&a, &b)| k * (a - b)));
            add_into(slot(nodes, grads, *t), dp.iter().zip(dt).map(|(&a, &b)| k * (b - a)));
        }
        Op::SqDistConst { x, target, scale } => {
            let k = g[0] * T::of_f64(2.0) * *scale;
            add_into(slot(nodes, grads, *x), val(*x).data().iter().zip(target.data()).map(|(&a, &b)| k * (a - b)));
        }
        Op::GatherRows { table, indices } => {
            let d = val(*table).shape().channels();
            let [_, _, h, w] = node.value.shape().0;
            let plane = h * w;
            if let Some(gt) = slot(nodes, grads, *table) {
                for (n, &row) in indices.iter().enumerate() {
                    let (ib, p) = (n / plane, n % plane);
                    for ch in 0..d {
                        gt[row * d + ch] = gt[row * d + ch] + g[(ib * d + ch) * plane + p];
                    }
                }
            }
        }
        Op::StraightThrough(x) => {
            add_into(slot(nodes, grads, *x), g.iter().copied());
        }
    }
    Ok(())
}

fn restore<T>(grads: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
    if let Some(buf) = buf {
        grads[v.0] = Some(buf);
    }
}
