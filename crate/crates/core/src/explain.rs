//! Grad-CAM saliency for every encoder and decoder level, image output, and
//! export of bottleneck vectors for external embedding tools.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use qmix_tensor::ops::pool::upsample2;
use qmix_tensor::{Real, Shape, Tensor};

use crate::blocks::BlockKind;
use crate::error::{config_err, Error, Result};
use crate::model::{Model, DECODER_STAGES, ENCODER_LEVELS};
use crate::params::Mode;
use crate::vq::{write_assignments_csv, write_codebook_csv};

/// A hook point of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layer {
    /// Conv block output of encoder level 1–5.
    EncoderBlock(usize),
    /// CBAM output of encoder level 1–5.
    EncoderCbam(usize),
    /// Conv block output of decoder stage 1–4.
    DecoderBlock(usize),
}

impl Layer {
    /// All 14 hook points in sweep order.
    pub fn all() -> Vec<Layer> {
        let mut v = Vec::with_capacity(2 * ENCODER_LEVELS + DECODER_STAGES);
        for l in 1..=ENCODER_LEVELS {
            v.push(Layer::EncoderBlock(l));
            v.push(Layer::EncoderCbam(l));
        }
        v.extend((1..=DECODER_STAGES).map(Layer::DecoderBlock));
        v
    }

    fn validate(self) -> Result<Self> {
        let ok = match self {
            Layer::EncoderBlock(l) | Layer::EncoderCbam(l) => (1..=ENCODER_LEVELS).contains(&l),
            Layer::DecoderBlock(s) => (1..=DECODER_STAGES).contains(&s),
        };
        if ok {
            Ok(self)
        } else {
            Err(config_err(format!("no such layer {self:?}")))
        }
    }

    /// `enc3` or `dec1`.
    pub fn level_name(self) -> String {
        match self {
            Layer::EncoderBlock(l) | Layer::EncoderCbam(l) => format!("enc{l}"),
            Layer::DecoderBlock(s) => format!("dec{s}"),
        }
    }

    /// `dsc`, `mix` or `cbam`, depending on the block found in `model`.
    pub fn block_name<T: Real>(self, model: &Model<T>) -> &'static str {
        let kind = match self {
            Layer::EncoderCbam(_) => return "cbam",
            Layer::EncoderBlock(l) => model.encoder[l - 1].block.kind(),
            Layer::DecoderBlock(s) => model.decoder[s - 1].kind(),
        };
        match kind {
            BlockKind::Dsc => "dsc",
            BlockKind::Mix => "mix",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::EncoderBlock(l) => write!(f, "enc{l}_block"),
            Layer::EncoderCbam(l) => write!(f, "enc{l}_cbam"),
            Layer::DecoderBlock(s) => write!(f, "dec{s}_block"),
        }
    }
}

/// Scalar whose gradient drives the saliency map.
#[derive(Clone, Debug, PartialEq)]
pub enum CamTarget {
    /// Mean of the predicted map.
    MeanPrediction,
    /// Mean of the prediction over pixels where the `H × W` mask is nonzero.
    MaskMean(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub layer: Layer,
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f64>,
}

/// Min-max normalize in place; a constant map becomes all zeros.
pub fn minmax_normalize(values: &mut [f64]) {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let span = hi - lo;
    values.iter_mut().for_each(|v| *v = (*v - lo) / span);
}

/// Grad-CAM map from an activation `(1, C, h, w)` and its gradient, upsampled
/// bilinearly to `out_size × out_size`.
pub fn cam_from_activation<T: Real>(activation: &Tensor<T>, gradient: &Tensor<T>, out_size: usize) -> Result<Vec<f64>> {
    let [b, c, h, w] = activation.shape().0;
    if b != 1 || gradient.shape() != activation.shape() {
        return Err(Error::Shape(format!(
            "Grad-CAM needs matching single-sample tensors, got {} and {}",
            activation.shape(),
            gradient.shape()
        )));
    }
    let plane = h * w;
    let mut cam = vec![0.0f64; plane];
    for ch in 0..c {
        let g = &gradient.data()[ch * plane..(ch + 1) * plane];
        let alpha = g.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        if alpha == 0.0 {
            continue;
        }
        let a = &activation.data()[ch * plane..(ch + 1) * plane];
        for (acc, v) in cam.iter_mut().zip(a) {
            *acc += alpha * v.as_f64();
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    minmax_normalize(&mut cam);

    let mut map = Tensor::<f64>::from_vec(Shape::new(1, 1, h, w), cam)?;
    while map.shape().height() < out_size {
        map = upsample2(&map);
    }
    if map.shape().height() != out_size || map.shape().width() != out_size {
        return Err(Error::Shape(format!("cannot upsample {h}x{w} to {out_size}x{out_size} by doubling")));
    }
    Ok(map.into_vec().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Maps for `layers` from one forward and one backward pass. `input` is a
/// single sample `(1, in_frames, S, S)`.
pub fn gradcam_layers<T: Real>(
    model: &Model<T>,
    input: &Tensor<T>,
    layers: &[Layer],
    target: &CamTarget,
) -> Result<Vec<SaliencyMap>> {
    for &l in layers {
        l.validate()?;
    }
    if input.shape().batch() != 1 {
        return Err(Error::Shape(format!("Grad-CAM takes one sample, got {}", input.shape())));
    }
    let size = model.config.input_size;
    let mut g = model.graph(Mode::Eval);
    let x = g.tape.constant(input.clone());
    let out = model.forward(&mut g, x)?;
    let hook = |l: Layer| match l {
        Layer::EncoderBlock(i) => out.hooks.encoder_block[i - 1],
        Layer::EncoderCbam(i) => out.hooks.encoder_cbam[i - 1],
        Layer::DecoderBlock(s) => out.hooks.decoder_block[s - 1],
    };
    for &l in layers {
        g.tape.retain_grad(hook(l));
    }
    let y = match target {
        CamTarget::MeanPrediction => g.tape.mean(out.prediction),
        CamTarget::MaskMean(mask) => {
            if mask.len() != size * size {
                return Err(Error::Shape(format!("mask has {} pixels, input has {}", mask.len(), size * size)));
            }
            let count = mask.iter().filter(|&&m| m != 0.0).count().max(1);
            let weights: Vec<T> = mask.iter().map(|&m| if m != 0.0 { T::one() } else { T::zero() }).collect();
            let masked = g.tape.mul_const(out.prediction, Tensor::from_vec(Shape::new(1, 1, size, size), weights)?)?;
            let s = g.tape.sum(masked);
            g.tape.scale(s, T::one() / T::of_f64(count as f64))
        }
    };
    g.backward(y)?;
    layers
        .iter()
        .map(|&l| {
            let v = hook(l);
            let a = g.tape.value(v);
            let zero;
            let grad = match g.tape.grad(v) {
                Some(gr) => gr,
                None => {
                    zero = Tensor::zeros(a.shape());
                    &zero
                }
            };
            Ok(SaliencyMap { layer: l, height: size, width: size, values: cam_from_activation(a, grad, size)? })
        })
        .collect()
}

pub fn gradcam<T: Real>(model: &Model<T>, input: &Tensor<T>, layer: Layer, target: &CamTarget) -> Result<SaliencyMap> {
    Ok(gradcam_layers(model, input, &[layer], target)?.remove(0))
}

/// One map per hook point: five encoder blocks, five CBAMs, four decoder
/// blocks.
pub fn gradcam_sweep<T: Real>(model: &Model<T>, input: &Tensor<T>, target: &CamTarget) -> Result<Vec<SaliencyMap>> {
    gradcam_layers(model, input, &Layer::all(), target)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(map: &SaliencyMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.values.iter().map(|&v| to_u8(v)));
    out
}

const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

/// Piecewise-linear viridis-like colour for `v ∈ [0, 1]`.
pub fn viridis(v: f64) -> [u8; 3] {
    let x = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let mut rgb = [0u8; 3];
    for (c, slot) in rgb.iter_mut().enumerate() {
        *slot = (VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f).round() as u8;
    }
    rgb
}

fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

fn colorize(map: &SaliencyMap) -> Vec<u8> {
    map.values.iter().flat_map(|&v| viridis(v)).collect()
}

/// Write each map as PGM and PNG plus a contact sheet; returns the paths.
pub fn write_sweep<T: Real>(model: &Model<T>, maps: &[SaliencyMap], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let variant = model.variant();
    let mut written = Vec::new();
    for map in maps {
        let stem = format!("gradcam_{variant}_{}_{}", map.layer.level_name(), map.layer.block_name(model));
        let pgm = dir.join(format!("{stem}.pgm"));
        std::fs::write(&pgm, encode_pgm(map)).map_err(|e| Error::io(&pgm, e))?;
        let png_path = dir.join(format!("{stem}.png"));
        write_png(&png_path, map.width, map.height, &colorize(map))?;
        written.push(pgm);
        written.push(png_path);
    }
    if !maps.is_empty() {
        let sheet = dir.join(format!("gradcam_sheet_{variant}.png"));
        let (w, h, rgb) = contact_sheet(maps);
        write_png(&sheet, w, h, &rgb)?;
        written.push(sheet);
    }
    Ok(written)
}

const SHEET_COLUMNS: usize = 5;
const SHEET_GAP: usize = 2;

/// Maps tiled in rows of five (encoder blocks, CBAMs, decoder blocks in sweep
/// order), separated by white gaps.
pub fn contact_sheet(maps: &[SaliencyMap]) -> (usize, usize, Vec<u8>) {
    let (mw, mh) = (maps[0].width, maps[0].height);
    let rows = maps.len().div_ceil(SHEET_COLUMNS);
    let width = SHEET_COLUMNS * mw + (SHEET_COLUMNS + 1) * SHEET_GAP;
    let height = rows * mh + (rows + 1) * SHEET_GAP;
    let mut rgb = vec![255u8; width * height * 3];
    // encoder blocks on row 0, CBAMs on row 1, decoder blocks on row 2
    let slot = |i: usize, m: &SaliencyMap| match m.layer {
        Layer::EncoderBlock(l) if maps.len() == 14 => (0, l - 1),
        Layer::EncoderCbam(l) if maps.len() == 14 => (1, l - 1),
        Layer::DecoderBlock(s) if maps.len() == 14 => (2, s - 1),
        _ => (i / SHEET_COLUMNS, i % SHEET_COLUMNS),
    };
    for (i, m) in maps.iter().enumerate() {
        let (r, c) = slot(i, m);
        let (x0, y0) = (SHEET_GAP + c * (mw + SHEET_GAP), SHEET_GAP + r * (mh + SHEET_GAP));
        for y in 0..m.height.min(mh) {
            for x in 0..m.width.min(mw) {
                let px = viridis(m.values[y * m.width + x]);
                let o = ((y0 + y) * width + x0 + x) * 3;
                rgb[o..o + 3].copy_from_slice(&px);
            }
        }
    }
    (width, height, rgb)
}

/// Bottleneck vectors and assignments written by [`export_embedding_inputs`].
#[derive(Clone, Debug)]
pub struct EmbeddingExport {
    pub vectors: Tensor<f32>,
    pub indices: Vec<usize>,
    pub codebook: Tensor<f32>,
}

/// Write the codebook and the pre-quantization vectors of `batch` with their
/// assigned codewords.
pub fn export_embedding_inputs<T: Real>(
    model: &Model<T>,
    batch: &Tensor<T>,
    codebook_out: &mut impl Write,
    assignments_out: &mut impl Write,
) -> Result<EmbeddingExport> {
    let cb = model
        .codebook
        .as_ref()
        .ok_or_else(|| config_err(format!("variant {} has no codebook to export", model.variant())))?;
    let mut g = model.graph(Mode::Eval);
    let x = g.tape.constant(batch.clone());
    let out = model.forward(&mut g, x)?;
    let vq = out.vq.as_ref().expect("VQ variant yields VQ output");
    let vectors: Tensor<f32> = g.tape.value(out.bottleneck).cast();
    let table: Tensor<f32> = model.params.value(cb.table).cast();
    let usage: Vec<f32> = model.buffers.get(cb.usage).cast::<f32>().into_vec();
    write_codebook_csv(codebook_out, &table, &usage).map_err(|e| Error::io("<codebook>", e))?;
    write_assignments_csv(assignments_out, &vectors, &vq.indices)?;
    Ok(EmbeddingExport { vectors, indices: vq.indices.clone(), codebook: table })
}
