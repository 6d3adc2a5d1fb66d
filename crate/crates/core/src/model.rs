//! The four UNet variants: baseline, +VQ, +MixConv, and both.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use qmix_tensor::{Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{BlockKind, Builder, Cbam, Conv, ConvBlock};
use crate::error::{config_err, Error, Result};
use crate::params::{BufferStore, Graph, Mode, ParamStore};
use crate::vq::{Codebook, VqNormalization, VqOutput};

pub const ENCODER_LEVELS: usize = 5;
pub const DECODER_STAGES: usize = 4;
/// Spatial reduction from input to bottleneck (four 2×2 poolings).
pub const DOWNSAMPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    Q,
    Mix,
    QMix,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Q, Variant::Mix, Variant::QMix];

    pub fn has_vq(self) -> bool {
        matches!(self, Variant::Q | Variant::QMix)
    }

    pub fn has_mix(self) -> bool {
        matches!(self, Variant::Mix | Variant::QMix)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Q => "q",
            Variant::Mix => "mix",
            Variant::QMix => "qmix",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config_err(format!("unknown variant {s:?} (baseline|q|mix|qmix)")))
    }
}

/// Codebook size, commitment weight and loss normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub beta: f64,
    pub normalization: VqNormalization,
    /// Weight of the VQ loss in the total training loss.
    pub loss_weight: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig { codebook_size: 32, beta: 0.75, normalization: VqNormalization::PerVector, loss_weight: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub in_frames: usize,
    pub input_size: usize,
    pub base_width: usize,
    pub depthwise_multiplier: usize,
    pub cbam_ratio: usize,
    /// Used only by the VQ variants.
    pub vq: VqConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::QMix,
            in_frames: 12,
            input_size: 288,
            base_width: 64,
            depthwise_multiplier: 2,
            cbam_ratio: 16,
            vq: VqConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Channel widths of encoder levels 1–5.
    pub fn encoder_widths(&self) -> [usize; ENCODER_LEVELS] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w, 8 * w]
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size / DOWNSAMPLE
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(DOWNSAMPLE) {
            return Err(config_err(format!("input_size {} must be a positive multiple of 16", self.input_size)));
        }
        if self.in_frames == 0 {
            return Err(config_err("in_frames must be at least 1"));
        }
        if self.base_width == 0 || self.depthwise_multiplier == 0 {
            return Err(config_err("base_width and depthwise_multiplier must be positive"));
        }
        if self.variant.has_vq() {
            if self.vq.codebook_size == 0 {
                return Err(config_err("codebook size must be at least 1"));
            }
            if !(self.vq.beta >= 0.0) || !(self.vq.loss_weight >= 0.0) {
                return Err(config_err("VQ beta and loss weight must be non-negative"));
            }
        }
        Ok(())
    }
}

/// One encoder level: conv block followed by CBAM.
#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub block: ConvBlock,
    pub cbam: Cbam,
}

/// Activations captured during a forward pass, for saliency.
#[derive(Clone, Debug)]
pub struct Hooks {
    pub encoder_block: Vec<Var>,
    pub encoder_cbam: Vec<Var>,
    pub decoder_block: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub prediction: Var,
    /// Level-5 CBAM output before quantization.
    pub bottleneck: Var,
    pub vq: Option<VqOutput>,
    pub hooks: Hooks,
}

/// A built model: architecture plus its parameters and buffers.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub buffers: BufferStore<T>,
    pub encoder: Vec<EncoderLevel>,
    pub codebook: Option<Codebook>,
    pub decoder: Vec<ConvBlock>,
    pub head: Conv,
}

/// Total and per-module parameter counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub per_module: BTreeMap<String, usize>,
}

impl<T: Real> Model<T> {
    /// Build and initialize a model; all initialization draws from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: &mut params, buffers: &mut buffers, rng: &mut rng };

        let m = config.depthwise_multiplier;
        let widths = config.encoder_widths();
        let mix = config.variant.has_mix();
        let mut encoder = Vec::with_capacity(ENCODER_LEVELS);
        let mut cin = config.in_frames;
        for (i, &cout) in widths.iter().enumerate() {
            let kind = if mix && i >= 3 { BlockKind::Mix } else { BlockKind::Dsc };
            let name = format!("enc{}", i + 1);
            let block = ConvBlock::new(&mut b, &format!("{name}.block"), kind, cin, cout, cout, m)?;
            let cbam = Cbam::new(&mut b, &format!("{name}.cbam"), cout, config.cbam_ratio)?;
            encoder.push(EncoderLevel { block, cbam });
            cin = cout;
        }

        let codebook = if config.variant.has_vq() {
            Some(Codebook::new(&mut b, "vq", config.vq.codebook_size, widths[4])?)
        } else {
            None
        };

        // decoder stage s joins the upsampled path with the skip of level 4 - s
        let w = config.base_width;
        let stages = [(16 * w, 8 * w, 4 * w), (8 * w, 4 * w, 2 * w), (4 * w, 2 * w, w), (2 * w, w, w)];
        let mut decoder = Vec::with_capacity(DECODER_STAGES);
        for (s, &(cin, mid, cout)) in stages.iter().enumerate() {
            let kind = if mix && s == 0 { BlockKind::Mix } else { BlockKind::Dsc };
            decoder.push(ConvBlock::new(&mut b, &format!("dec{}.block", s + 1), kind, cin, mid, cout, m)?);
        }
        let head = Conv::new(&mut b, "head", w, 1, 1, 1, true)?;

        Ok(Model { config: config.clone(), params, buffers, encoder, codebook, decoder, head })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn graph(&self, mode: Mode) -> Graph<'_, T> {
        Graph::new(&self.params, &self.buffers, mode)
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut per_module = BTreeMap::new();
        for (_, p) in self.params.iter() {
            let module = p.name.split('.').next().unwrap_or("").to_string();
            *per_module.entry(module).or_insert(0) += p.value.numel();
        }
        ParamCount { total: self.params.numel(), per_module }
    }

    /// Run the network on `x` (`(B, in_frames, S, S)`), recording on `g`.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<ForwardOutput> {
        let [_, c, h, w] = g.tape.shape(x).0;
        let s = self.config.input_size;
        if c != self.config.in_frames || h != s || w != s {
            return Err(Error::Shape(format!(
                "model expects (B, {}, {s}, {s}) input, got {}",
                self.config.in_frames,
                g.tape.shape(x)
            )));
        }
        let mut hooks = Hooks { encoder_block: Vec::new(), encoder_cbam: Vec::new(), decoder_block: Vec::new() };
        let mut skips = Vec::with_capacity(ENCODER_LEVELS);
        let mut y = x;
        for (i, level) in self.encoder.iter().enumerate() {
            let conv = level.block.forward(g, y)?;
            let att = level.cbam.forward(g, conv)?;
            hooks.encoder_block.push(conv);
            hooks.encoder_cbam.push(att);
            skips.push(att);
            y = if i + 1 < ENCODER_LEVELS { g.tape.max_pool2(att)? } else { att };
        }
        let bottleneck = y;
        let vq = match &self.codebook {
            Some(cb) => {
                let out = cb.quantize(g, bottleneck, self.config.vq.beta, self.config.vq.normalization)?;
                y = out.z_q;
                Some(out)
            }
            None => None,
        };
        for (s, block) in self.decoder.iter().enumerate() {
            let up = g.tape.upsample2(y);
            let joined = g.tape.concat_channels(up, skips[ENCODER_LEVELS - 2 - s])?;
            y = block.forward(g, joined)?;
            hooks.decoder_block.push(y);
        }
        let prediction = self.head.forward(g, y)?;
        Ok(ForwardOutput { prediction, bottleneck, vq, hooks })
    }

    /// Eval-mode prediction without keeping the tape.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.graph(Mode::Eval);
        let xv = g.tape.constant(x.clone());
        let out = self.forward(&mut g, xv)?;
        Ok(g.tape.value(out.prediction).clone())
    }
}
