//! Named parameter and buffer registries, and the [`Graph`] that binds them
//! onto a tape for one forward pass.

use std::collections::HashMap;

use qmix_tensor::{BatchStats, Real, Shape, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered registry of trainable parameters with unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, grad: None });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => acc.data_mut().iter_mut().zip(grad.data()).for_each(|(a, &g)| *a = *a + g),
            None => p.grad = Some(grad.clone()),
        }
    }
}

/// Non-trainable state: batch-norm running statistics and codebook usage.
#[derive(Clone, Debug, Default)]
pub struct BufferStore<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> BufferStore<T> {
    pub fn new() -> Self {
        BufferStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate buffer name {name}");
        self.names.push(name);
        self.values.push(value);
        BufferId(self.values.len() - 1)
    }

    pub fn get(&self, id: BufferId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn id(&self, name: &str) -> Option<BufferId> {
        self.names.iter().position(|n| n == name).map(BufferId)
    }
}

/// Kaiming-uniform fan-in initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real>(shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of_f64(rng.gen_range(-bound..bound)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics and codebook usage
    /// are updated when the step is applied.
    Train,
    /// Running statistics; no state changes.
    Eval,
}

/// A pending running-statistics update from one training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats<T>,
}

/// State changes produced by one forward/backward pass.
#[derive(Debug)]
pub struct StepEffects<T: Real> {
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub bn: Vec<BnUpdate<T>>,
    pub usage: Vec<(BufferId, Vec<usize>)>,
}

/// Running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl<T: Real> StepEffects<T> {
    /// Accumulate gradients and fold batch statistics and codebook usage into
    /// the buffers.
    pub fn apply(self, params: &mut ParamStore<T>, buffers: &mut BufferStore<T>) {
        for (id, g) in &self.grads {
            params.accumulate_grad(*id, g);
        }
        self.apply_state(buffers);
    }

    /// Only the buffer updates; gradients are dropped.
    pub fn apply_state(&self, buffers: &mut BufferStore<T>) {
        let m = T::of_f64(BN_MOMENTUM);
        for u in &self.bn {
            let n = u.stats.count;
            // running variance tracks the unbiased estimate
            let correction = if n > 1 { T::of_f64(n as f64 / (n as f64 - 1.0)) } else { T::one() };
            let rm = buffers.get_mut(u.mean).data_mut();
            for (r, &b) in rm.iter_mut().zip(&u.stats.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            let rv = buffers.get_mut(u.var).data_mut();
            for (r, &b) in rv.iter_mut().zip(&u.stats.var) {
                *r = (T::one() - m) * *r + m * b * correction;
            }
        }
        for (id, indices) in &self.usage {
            let usage = buffers.get_mut(*id).data_mut();
            for &k in indices {
                usage[k] = usage[k] + T::one();
            }
        }
    }
}

/// One forward pass: a tape plus lazily bound parameters.
pub struct Graph<'a, T: Real> {
    pub tape: Tape<T>,
    params: &'a ParamStore<T>,
    buffers: &'a BufferStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    bn: Vec<BnUpdate<T>>,
    usage: Vec<(BufferId, Vec<usize>)>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(params: &'a ParamStore<T>, buffers: &'a BufferStore<T>, mode: Mode) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            buffers,
            bound: vec![None; params.len()],
            mode,
            bn: Vec::new(),
            usage: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        self.buffers.get(id)
    }

    /// The tape variable holding a parameter, bound on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.variable(self.params.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn record_bn(&mut self, update: BnUpdate<T>) {
        if self.mode == Mode::Train {
            self.bn.push(update);
        }
    }

    pub fn record_usage(&mut self, buffer: BufferId, indices: Vec<usize>) {
        if self.mode == Mode::Train {
            self.usage.push((buffer, indices));
        }
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss).map_err(Error::from)
    }

    /// Gradients of every bound parameter plus the recorded state updates.
    pub fn finish(mut self) -> StepEffects<T> {
        let mut grads = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.tape.take_grad(*v) {
                    grads.push((ParamId(i), g));
                }
            }
        }
        StepEffects { grads, bn: self.bn, usage: self.usage }
    }
}
