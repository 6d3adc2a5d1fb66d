//! Synthetic radar sequences: advected Gaussian rain cells on a periodic
//! grid, sliding-window samples, the rainy-target filter and `.rseq` files.

use std::path::Path;

use qmix_tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, FormatError, Result};

/// A normalized sequence of rain maps.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarSequence {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub cadence_minutes: f32,
    /// Divisor that mapped the raw field into `[0, 1]`.
    pub normalization_max: f32,
    /// `frames × height × width` row-major values in `[0, 1]`.
    pub data: Vec<f32>,
}

impl RadarSequence {
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    /// Frames `[start, start + len)` as a new sequence.
    pub fn slice(&self, start: usize, len: usize) -> RadarSequence {
        let n = self.height * self.width;
        RadarSequence {
            frames: len,
            data: self.data[start * n..(start + len) * n].to_vec(),
            ..self.clone()
        }
    }
}

/// One isotropic Gaussian cell moving at constant velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub amplitude: f64,
    pub sigma: f64,
    /// Position at frame 0, `(row, column)` in pixels.
    pub origin: (f64, f64),
    /// Pixels per frame, `(rows, columns)`.
    pub velocity: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_cells: usize,
    pub amplitude: (f64, f64),
    pub sigma: (f64, f64),
    /// Range of each velocity component, pixels per frame.
    pub speed: (f64, f64),
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub cadence_minutes: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            n_cells: 10,
            amplitude: (0.5, 1.0),
            sigma: (4.0, 9.0),
            speed: (-1.5, 1.5),
            height: 64,
            width: 64,
            frames: 200,
            cadence_minutes: 5.0,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(config_err("generator grid and length must be positive"));
        }
        for (name, (lo, hi)) in [("amplitude", self.amplitude), ("sigma", self.sigma), ("speed", self.speed)] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(config_err(format!("generator {name} range ({lo}, {hi}) is invalid")));
            }
        }
        if self.sigma.0 <= 0.0 || self.amplitude.0 < 0.0 {
            return Err(config_err("cell sigma must be positive and amplitude non-negative"));
        }
        Ok(())
    }

    /// Cells drawn from this configuration's seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.n_cells)
            .map(|_| Cell {
                amplitude: draw(&mut rng, self.amplitude),
                sigma: draw(&mut rng, self.sigma),
                origin: (rng.gen_range(0.0..self.height as f64), rng.gen_range(0.0..self.width as f64)),
                velocity: (draw(&mut rng, self.speed), draw(&mut rng, self.speed)),
            })
            .collect()
    }
}

/// Signed offset from `c` to `x` on a ring of length `n`, in `[-n/2, n/2)`.
fn wrap_delta(x: f64, c: f64, n: f64) -> f64 {
    (x - c + n / 2.0).rem_euclid(n) - n / 2.0
}

/// Unnormalized field of `cells` at frame `t`.
pub fn render(cells: &[Cell], t: usize, height: usize, width: usize) -> Vec<f64> {
    let (hf, wf) = (height as f64, width as f64);
    let mut field = vec![0.0; height * width];
    for cell in cells {
        let cy = (cell.origin.0 + cell.velocity.0 * t as f64).rem_euclid(hf);
        let cx = (cell.origin.1 + cell.velocity.1 * t as f64).rem_euclid(wf);
        let inv = 1.0 / (2.0 * cell.sigma * cell.sigma);
        let col: Vec<f64> = (0..width).map(|x| (-wrap_delta(x as f64, cx, wf).powi(2) * inv).exp()).collect();
        for y in 0..height {
            let gy = cell.amplitude * (-wrap_delta(y as f64, cy, hf).powi(2) * inv).exp();
            for (v, &gx) in field[y * width..(y + 1) * width].iter_mut().zip(&col) {
                *v += gy * gx;
            }
        }
    }
    field
}

/// Render `cells` for `frames` steps and normalize by the sequence maximum.
pub fn sequence_from_cells(cells: &[Cell], frames: usize, height: usize, width: usize, cadence: f32) -> RadarSequence {
    let mut raw = Vec::with_capacity(frames * height * width);
    for t in 0..frames {
        raw.extend(render(cells, t, height, width));
    }
    let max = raw.iter().copied().fold(0.0f64, f64::max);
    let norm = if max > 0.0 { max } else { 1.0 };
    RadarSequence {
        frames,
        height,
        width,
        cadence_minutes: cadence,
        normalization_max: norm as f32,
        data: raw.iter().map(|&v| ((v / norm) as f32).clamp(0.0, 1.0)).collect(),
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<RadarSequence> {
    config.validate()?;
    Ok(sequence_from_cells(&config.cells(), config.frames, config.height, config.width, config.cadence_minutes))
}

/// Input frames and the frame `lead_steps` after the last of them.
#[derive(Clone, Debug, PartialEq)]
pub struct NowcastSample {
    pub in_frames: usize,
    pub height: usize,
    pub width: usize,
    /// `in_frames × H × W`.
    pub input: Vec<f32>,
    /// `H × W`.
    pub target: Vec<f32>,
}

impl NowcastSample {
    pub fn last_input(&self) -> &[f32] {
        let n = self.height * self.width;
        &self.input[(self.in_frames - 1) * n..]
    }
}

/// One sample per start index, sliding by one frame.
pub fn window(seq: &RadarSequence, in_frames: usize, lead_steps: usize) -> Result<Vec<NowcastSample>> {
    if lead_steps == 0 {
        return Err(config_err("lead_steps must be at least 1"));
    }
    if in_frames == 0 {
        return Err(config_err("in_frames must be at least 1"));
    }
    let span = in_frames + lead_steps;
    if seq.frames < span {
        return Ok(Vec::new());
    }
    let n = seq.height * seq.width;
    Ok((0..=seq.frames - span)
        .map(|start| NowcastSample {
            in_frames,
            height: seq.height,
            width: seq.width,
            input: seq.data[start * n..(start + in_frames) * n].to_vec(),
            target: seq.frame(start + in_frames - 1 + lead_steps).to_vec(),
        })
        .collect())
}

/// True iff at least half of the target pixels reach `rain_threshold`.
pub fn nl50_filter(sample: &NowcastSample, rain_threshold: f32) -> bool {
    let rainy = sample.target.iter().filter(|&&v| v >= rain_threshold).count();
    2 * rainy >= sample.target.len() && !sample.target.is_empty()
}

pub const RSEQ_MAGIC: [u8; 4] = *b"RSEQ";
pub const RSEQ_VERSION: u32 = 1;
const RSEQ_HEADER: usize = 4 + 4 * 4 + 2 * 4;

pub fn encode_rseq(seq: &RadarSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(RSEQ_HEADER + 4 * seq.data.len());
    out.extend_from_slice(&RSEQ_MAGIC);
    for v in [RSEQ_VERSION, seq.frames as u32, seq.height as u32, seq.width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&seq.cadence_minutes.to_le_bytes());
    out.extend_from_slice(&seq.normalization_max.to_le_bytes());
    for v in &seq.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_rseq(bytes: &[u8]) -> Result<RadarSequence, FormatError> {
    if bytes.len() < RSEQ_HEADER {
        return Err(FormatError::Truncated(format!("rseq header needs {RSEQ_HEADER} bytes, got {}", bytes.len())));
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().expect("4 bytes") };
    let magic = word(0);
    if magic != RSEQ_MAGIC {
        return Err(FormatError::BadMagic { expected: RSEQ_MAGIC, found: magic });
    }
    let version = u32::from_le_bytes(word(4));
    if version != RSEQ_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let (frames, height, width) =
        (u32::from_le_bytes(word(8)) as usize, u32::from_le_bytes(word(12)) as usize, u32::from_le_bytes(word(16)) as usize);
    let cadence_minutes = f32::from_le_bytes(word(20));
    let normalization_max = f32::from_le_bytes(word(24));
    let n = frames
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| FormatError::Malformed("rseq dimensions overflow".into()))?;
    let payload = &bytes[RSEQ_HEADER..];
    if payload.len() < 4 * n {
        return Err(FormatError::Truncated(format!(
            "header declares {frames}x{height}x{width} values, payload holds {}",
            payload.len() / 4
        )));
    }
    if payload.len() > 4 * n {
        return Err(FormatError::Malformed(format!("{} trailing bytes after frames", payload.len() - 4 * n)));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(RadarSequence { frames, height, width, cadence_minutes, normalization_max, data })
}

pub fn write_rseq(path: &Path, seq: &RadarSequence) -> Result<()> {
    std::fs::write(path, encode_rseq(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_rseq(path: &Path) -> Result<RadarSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_rseq(&bytes)?)
}

/// Samples stacked for batching.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<NowcastSample>,
}

impl Dataset {
    pub fn new(samples: Vec<NowcastSample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Inputs `(n, in_frames, H, W)` and targets `(n, 1, H, W)` for the
    /// listed sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let first = self.samples.first().ok_or_else(|| Error::Usage("empty dataset".into()))?;
        let (c, h, w) = (first.in_frames, first.height, first.width);
        let mut x = Vec::with_capacity(indices.len() * c * h * w);
        let mut y = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            let s = &self.samples[i];
            x.extend_from_slice(&s.input);
            y.extend_from_slice(&s.target);
        }
        Ok((
            Tensor::from_vec(Shape::new(indices.len(), c, h, w), x)?,
            Tensor::from_vec(Shape::new(indices.len(), 1, h, w), y)?,
        ))
    }
}

/// Train / validation / test datasets.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Options for turning sequences into split datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub in_frames: usize,
    pub lead_steps: usize,
    /// Fractions of each sequence's frames assigned to train and validation;
    /// the remainder is test.
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Keep every n-th training window.
    pub train_stride: usize,
    /// Keep only samples whose target passes [`nl50_filter`].
    pub rainy_only: bool,
    pub rain_threshold: f32,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            in_frames: 12,
            lead_steps: 6,
            train_fraction: 0.70,
            val_fraction: 0.15,
            train_stride: 1,
            rainy_only: false,
            rain_threshold: 0.5,
        }
    }
}

/// Cut each sequence into contiguous train/val/test time blocks and window
/// each block separately, so no sample straddles two splits.
pub fn split_sequences(seqs: &[RadarSequence], cfg: &SplitConfig) -> Result<Splits> {
    if !(cfg.train_fraction > 0.0 && cfg.val_fraction >= 0.0 && cfg.train_fraction + cfg.val_fraction <= 1.0) {
        return Err(config_err("split fractions must satisfy 0 < train, 0 <= val, train + val <= 1"));
    }
    if cfg.train_stride == 0 {
        return Err(config_err("train_stride must be at least 1"));
    }
    let mut out = Splits::default();
    for seq in seqs {
        let t_train = (seq.frames as f64 * cfg.train_fraction).round() as usize;
        let t_val = (seq.frames as f64 * (cfg.train_fraction + cfg.val_fraction)).round() as usize;
        let blocks = [(0, t_train), (t_train, t_val), (t_val, seq.frames)];
        for (i, &(a, b)) in blocks.iter().enumerate() {
            let mut samples = window(&seq.slice(a, b - a), cfg.in_frames, cfg.lead_steps)?;
            if cfg.rainy_only {
                samples.retain(|s| nl50_filter(s, cfg.rain_threshold));
            }
            let dest = match i {
                0 => {
                    samples = samples.into_iter().step_by(cfg.train_stride).collect();
                    &mut out.train
                }
                1 => &mut out.val,
                _ => &mut out.test,
            };
            dest.samples.extend(samples);
        }
    }
    Ok(out)
}
