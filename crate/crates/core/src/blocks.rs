//! Architecture blocks: depthwise-separable pairs, MixConv pairs and CBAM.

use qmix_tensor::{Axis, ConvSpec, Real, Reduce, Shape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::params::{kaiming_uniform, BnUpdate, BufferId, BufferStore, Graph, Mode, ParamId, ParamStore, BN_EPS};

/// Mutable registries plus the initialization stream, used while building.
pub struct Builder<'a, T: Real> {
    pub params: &'a mut ParamStore<T>,
    pub buffers: &'a mut BufferStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn zeros(&mut self, name: String, shape: Shape) -> ParamId {
        self.params.add(name, Tensor::zeros(shape))
    }
}

/// 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(config_err(format!(
                "{name}: {in_channels} -> {out_channels} channels not divisible into {groups} groups"
            )));
        }
        let cin_g = in_channels / groups;
        let shape = Shape::new(out_channels, cin_g, kernel, kernel);
        let weight = b.params.add(format!("{name}.weight"), kaiming_uniform(shape, cin_g * kernel * kernel, b.rng));
        let bias = bias.then(|| b.zeros(format!("{name}.bias"), Shape::new(out_channels, 1, 1, 1)));
        Ok(Conv { weight, bias, spec: ConvSpec::same(kernel, groups), in_channels, out_channels })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|id| g.param(id));
        Ok(g.tape.conv2d(x, w, b, self.spec)?)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        let shape = Shape::new(channels, 1, 1, 1);
        BatchNorm {
            gamma: b.params.add(format!("{name}.gamma"), Tensor::full(shape, T::one())),
            beta: b.zeros(format!("{name}.beta"), shape),
            running_mean: b.buffers.add(format!("{name}.running_mean"), Tensor::zeros(shape)),
            running_var: b.buffers.add(format!("{name}.running_var"), Tensor::full(shape, T::one())),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let eps = T::of_f64(BN_EPS);
        match g.mode() {
            Mode::Train => {
                let (y, stats) = g.tape.batch_norm_train(x, gamma, beta, eps)?;
                g.record_bn(BnUpdate { mean: self.running_mean, var: self.running_var, stats });
                Ok(y)
            }
            Mode::Eval => {
                let mean = g.buffer(self.running_mean).data().to_vec();
                let var = g.buffer(self.running_var).data().to_vec();
                Ok(g.tape.batch_norm_eval(x, gamma, beta, &mean, &var, eps)?)
            }
        }
    }
}

/// Depthwise 3×3 (multiplier `m`) → pointwise → BN → ReLU.
#[derive(Clone, Debug)]
pub struct DscStage {
    pub depthwise: Conv,
    pub pointwise: Conv,
    pub bn: BatchNorm,
}

impl DscStage {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(config_err("depthwise multiplier must be at least 1"));
        }
        Ok(DscStage {
            depthwise: Conv::new(b, &format!("{name}.dw"), cin, cin * m, 3, cin, true)?,
            pointwise: Conv::new(b, &format!("{name}.pw"), cin * m, cout, 1, 1, true)?,
            bn: BatchNorm::new(b, &format!("{name}.bn"), cout),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.depthwise.forward(g, x)?;
        let y = self.pointwise.forward(g, y)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.tape.relu(y))
    }
}

/// Channel split into contiguous halves → depthwise 3×3 on the lower half and
/// 5×5 on the upper half → concat → pointwise → BN → ReLU.
#[derive(Clone, Debug)]
pub struct MixStage {
    pub dw3: Conv,
    pub dw5: Conv,
    pub pointwise: Conv,
    pub bn: BatchNorm,
    pub half: usize,
}

impl MixStage {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        if !cin.is_multiple_of(2) || cin == 0 {
            return Err(config_err(format!("{name}: MixConv needs an even channel count, got {cin}")));
        }
        let half = cin / 2;
        Ok(MixStage {
            dw3: Conv::new(b, &format!("{name}.dw3"), half, half, 3, half, true)?,
            dw5: Conv::new(b, &format!("{name}.dw5"), half, half, 5, half, true)?,
            pointwise: Conv::new(b, &format!("{name}.pw"), cin, cout, 1, 1, true)?,
            bn: BatchNorm::new(b, &format!("{name}.bn"), cout),
            half,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let lo = g.tape.slice_channels(x, 0, self.half)?;
        let hi = g.tape.slice_channels(x, self.half, self.half)?;
        let lo = self.dw3.forward(g, lo)?;
        let hi = self.dw5.forward(g, hi)?;
        let y = g.tape.concat_channels(lo, hi)?;
        let y = self.pointwise.forward(g, y)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.tape.relu(y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Dsc,
    Mix,
}

/// Two stages `in → mid → out`, either depthwise-separable or MixConv.
#[derive(Clone, Debug)]
pub enum ConvBlock {
    Dsc([DscStage; 2]),
    Mix([MixStage; 2]),
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        kind: BlockKind,
        cin: usize,
        mid: usize,
        cout: usize,
        m: usize,
    ) -> Result<Self> {
        Ok(match kind {
            BlockKind::Dsc => ConvBlock::Dsc([
                DscStage::new(b, &format!("{name}.0"), cin, mid, m)?,
                DscStage::new(b, &format!("{name}.1"), mid, cout, m)?,
            ]),
            BlockKind::Mix => ConvBlock::Mix([
                MixStage::new(b, &format!("{name}.0"), cin, mid)?,
                MixStage::new(b, &format!("{name}.1"), mid, cout)?,
            ]),
        })
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            ConvBlock::Dsc(_) => BlockKind::Dsc,
            ConvBlock::Mix(_) => BlockKind::Mix,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            ConvBlock::Dsc(s) => s[0].depthwise.in_channels,
            ConvBlock::Mix(s) => s[0].pointwise.in_channels,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = g.tape.shape(x).channels();
        if c != self.in_channels() {
            return Err(Error::Shape(format!("block expects {} channels, got {c}", self.in_channels())));
        }
        match self {
            ConvBlock::Dsc([a, b]) => {
                let y = a.forward(g, x)?;
                b.forward(g, y)
            }
            ConvBlock::Mix([a, b]) => {
                let y = a.forward(g, x)?;
                b.forward(g, y)
            }
        }
    }
}

/// Channel attention (shared MLP over average- and max-pooled descriptors)
/// followed by spatial attention (7×7 conv over channel mean/max maps).
#[derive(Clone, Debug)]
pub struct Cbam {
    pub fc1: Conv,
    pub fc2: Conv,
    pub spatial: Conv,
    pub channels: usize,
}

pub const CBAM_SPATIAL_KERNEL: usize = 7;

/// Intermediate CBAM values, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct CbamTrace {
    pub channel_gate: Var,
    pub spatial_gate: Var,
    pub output: Var,
}

impl Cbam {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(config_err(format!("{name}: {channels} channels not divisible by CBAM ratio {ratio}")));
        }
        let hidden = channels / ratio;
        Ok(Cbam {
            fc1: Conv::new(b, &format!("{name}.fc1"), channels, hidden, 1, 1, true)?,
            fc2: Conv::new(b, &format!("{name}.fc2"), hidden, channels, 1, 1, true)?,
            spatial: Conv::new(b, &format!("{name}.spatial"), 2, 1, CBAM_SPATIAL_KERNEL, 1, true)?,
            channels,
        })
    }

    fn mlp<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.relu(h);
        self.fc2.forward(g, h)
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<CbamTrace> {
        let c = g.tape.shape(x).channels();
        if c != self.channels {
            return Err(Error::Shape(format!("CBAM expects {} channels, got {c}", self.channels)));
        }
        let avg = g.tape.reduce(x, Axis::Spatial, Reduce::Mean);
        let max = g.tape.reduce(x, Axis::Spatial, Reduce::Max);
        let a = self.mlp(g, avg)?;
        let m = self.mlp(g, max)?;
        let logits = g.tape.add(a, m)?;
        let channel_gate = g.tape.sigmoid(logits);
        let y = g.tape.mul_broadcast(x, channel_gate)?;

        let cmean = g.tape.reduce(y, Axis::Channel, Reduce::Mean);
        let cmax = g.tape.reduce(y, Axis::Channel, Reduce::Max);
        let desc = g.tape.concat_channels(cmean, cmax)?;
        let s = self.spatial.forward(g, desc)?;
        let spatial_gate = g.tape.sigmoid(s);
        let output = g.tape.mul_broadcast(y, spatial_gate)?;
        Ok(CbamTrace { channel_gate, spatial_gate, output })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.trace(g, x)?.output)
    }
}

/// Parameter count of a depthwise-separable stage, by formula.
pub fn dsc_stage_params(cin: usize, cout: usize, m: usize) -> usize {
    (cin * m * 9 + cin * m) + (cin * m * cout + cout) + 2 * cout
}

/// Parameter count of a MixConv stage, by formula.
pub fn mix_stage_params(cin: usize, cout: usize) -> usize {
    let h = cin / 2;
    (h * 9 + h) + (h * 25 + h) + (cin * cout + cout) + 2 * cout
}
