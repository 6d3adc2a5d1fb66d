//! Flat `key = value` run configuration covering model, training, data
//! generation and evaluation settings.
//!
//! Precedence is defaults < file < explicit overrides. Unknown keys are
//! rejected. [`RunConfig::to_text`] emits every key, so a resolved file alone
//! reproduces a run.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{GeneratorConfig, SplitConfig};
use crate::error::{config_err, Error, Result};
use crate::model::{ModelConfig, Variant, VqConfig};
use crate::train::TrainConfig;
use crate::vq::VqNormalization;

pub const RESOLVED_CONFIG_FILE: &str = "run.resolved.cfg";

/// Consumers of the master seed; each gets a fixed offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStream {
    /// Sequence `i` of the synthetic dataset.
    Generator(u64),
    Init,
    Shuffle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub n_sequences: usize,
    pub split: SplitConfig,
    pub tune_epochs: usize,
    pub tune_early_stop_patience: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig { input_size: 64, ..ModelConfig::default() },
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
            n_sequences: 8,
            split: SplitConfig::default(),
            tune_epochs: 25,
            tune_early_stop_patience: 8,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| config_err(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err(format!("invalid boolean {value:?} for key {key}"))),
    }
}

/// Every recognised key, in the order written to resolved files.
pub const KEYS: &[&str] = &[
    "seed",
    "variant",
    "in_frames",
    "input_size",
    "base_width",
    "depthwise_multiplier",
    "cbam_ratio",
    "codebook_size",
    "beta",
    "vq_normalization",
    "vq_loss_weight",
    "lr",
    "batch_size",
    "max_epochs",
    "lr_patience",
    "lr_factor",
    "early_stop_patience",
    "gen_cells",
    "gen_amplitude_min",
    "gen_amplitude_max",
    "gen_sigma_min",
    "gen_sigma_max",
    "gen_speed_min",
    "gen_speed_max",
    "grid_size",
    "sequence_length",
    "n_sequences",
    "cadence_minutes",
    "lead_steps",
    "train_fraction",
    "val_fraction",
    "train_stride",
    "rainy_only",
    "rain_threshold",
    "tune_epochs",
    "tune_early_stop_patience",
];

impl RunConfig {
    /// Derived seed for one consumer.
    pub fn seed_for(&self, stream: SeedStream) -> u64 {
        match stream {
            SeedStream::Generator(i) => self.seed.wrapping_add(1_000).wrapping_add(i),
            SeedStream::Init => self.seed.wrapping_add(2),
            SeedStream::Shuffle => self.seed.wrapping_add(3),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let g = &mut self.generator;
        let s = &mut self.split;
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "variant" => m.variant = Variant::from_str(v)?,
            "in_frames" => {
                m.in_frames = parse(key, v)?;
                s.in_frames = m.in_frames;
            }
            "input_size" => m.input_size = parse(key, v)?,
            "base_width" => m.base_width = parse(key, v)?,
            "depthwise_multiplier" => m.depthwise_multiplier = parse(key, v)?,
            "cbam_ratio" => m.cbam_ratio = parse(key, v)?,
            "codebook_size" => m.vq.codebook_size = parse(key, v)?,
            "beta" => m.vq.beta = parse(key, v)?,
            "vq_normalization" => m.vq.normalization = VqNormalization::from_str(v)?,
            "vq_loss_weight" => m.vq.loss_weight = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "lr_patience" => t.lr_patience = parse(key, v)?,
            "lr_factor" => t.lr_factor = parse(key, v)?,
            "early_stop_patience" => t.early_stop_patience = parse(key, v)?,
            "gen_cells" => g.n_cells = parse(key, v)?,
            "gen_amplitude_min" => g.amplitude.0 = parse(key, v)?,
            "gen_amplitude_max" => g.amplitude.1 = parse(key, v)?,
            "gen_sigma_min" => g.sigma.0 = parse(key, v)?,
            "gen_sigma_max" => g.sigma.1 = parse(key, v)?,
            "gen_speed_min" => g.speed.0 = parse(key, v)?,
            "gen_speed_max" => g.speed.1 = parse(key, v)?,
            "grid_size" => {
                g.height = parse(key, v)?;
                g.width = g.height;
            }
            "sequence_length" => g.frames = parse(key, v)?,
            "n_sequences" => self.n_sequences = parse(key, v)?,
            "cadence_minutes" => g.cadence_minutes = parse(key, v)?,
            "lead_steps" => s.lead_steps = parse(key, v)?,
            "train_fraction" => s.train_fraction = parse(key, v)?,
            "val_fraction" => s.val_fraction = parse(key, v)?,
            "train_stride" => s.train_stride = parse(key, v)?,
            "rainy_only" => s.rainy_only = parse_bool(key, v)?,
            "rain_threshold" => s.rain_threshold = parse(key, v)?,
            "tune_epochs" => self.tune_epochs = parse(key, v)?,
            "tune_early_stop_patience" => self.tune_early_stop_patience = parse(key, v)?,
            other => return Err(config_err(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let (m, t, g, s) = (&self.model, &self.train, &self.generator, &self.split);
        match key {
            "seed" => self.seed.to_string(),
            "variant" => m.variant.to_string(),
            "in_frames" => m.in_frames.to_string(),
            "input_size" => m.input_size.to_string(),
            "base_width" => m.base_width.to_string(),
            "depthwise_multiplier" => m.depthwise_multiplier.to_string(),
            "cbam_ratio" => m.cbam_ratio.to_string(),
            "codebook_size" => m.vq.codebook_size.to_string(),
            "beta" => m.vq.beta.to_string(),
            "vq_normalization" => m.vq.normalization.to_string(),
            "vq_loss_weight" => m.vq.loss_weight.to_string(),
            "lr" => t.lr.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "lr_patience" => t.lr_patience.to_string(),
            "lr_factor" => t.lr_factor.to_string(),
            "early_stop_patience" => t.early_stop_patience.to_string(),
            "gen_cells" => g.n_cells.to_string(),
            "gen_amplitude_min" => g.amplitude.0.to_string(),
            "gen_amplitude_max" => g.amplitude.1.to_string(),
            "gen_sigma_min" => g.sigma.0.to_string(),
            "gen_sigma_max" => g.sigma.1.to_string(),
            "gen_speed_min" => g.speed.0.to_string(),
            "gen_speed_max" => g.speed.1.to_string(),
            "grid_size" => g.height.to_string(),
            "sequence_length" => g.frames.to_string(),
            "n_sequences" => self.n_sequences.to_string(),
            "cadence_minutes" => g.cadence_minutes.to_string(),
            "lead_steps" => s.lead_steps.to_string(),
            "train_fraction" => s.train_fraction.to_string(),
            "val_fraction" => s.val_fraction.to_string(),
            "train_stride" => s.train_stride.to_string(),
            "rainy_only" => s.rainy_only.to_string(),
            "rain_threshold" => s.rain_threshold.to_string(),
            "tune_epochs" => self.tune_epochs.to_string(),
            "tune_early_stop_patience" => self.tune_early_stop_patience.to_string(),
            other => unreachable!("key {other} missing from get"),
        }
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => config_err(format!("line {}: {m}", no + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Apply `key=value` overrides.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| config_err(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.generator.validate()?;
        if self.split.lead_steps == 0 {
            return Err(config_err("lead_steps must be at least 1"));
        }
        if !(self.split.rain_threshold > 0.0 && self.split.rain_threshold < 1.0) {
            return Err(config_err("rain_threshold must lie in (0, 1)"));
        }
        if self.tune_epochs == 0 || self.tune_early_stop_patience == 0 {
            return Err(config_err("tune_epochs and tune_early_stop_patience must be at least 1"));
        }
        Ok(())
    }

    /// Generator settings for sequence `i`.
    pub fn generator_for(&self, i: u64) -> GeneratorConfig {
        GeneratorConfig { seed: self.seed_for(SeedStream::Generator(i)), ..self.generator.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed_for(SeedStream::Shuffle), ..self.train.clone() }
    }

    /// Training settings of one grid-search cell.
    pub fn tune_train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.tune_epochs,
            early_stop_patience: self.tune_early_stop_patience,
            ..self.train_config()
        }
    }

    pub fn vq(&self) -> VqConfig {
        self.model.vq
    }
}
