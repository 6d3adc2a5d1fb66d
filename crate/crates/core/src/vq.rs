//! Vector-quantization bottleneck: codebook, nearest-codeword assignment,
//! the two-term loss and the straight-through estimator.

use std::io::Write;

use qmix_tensor::{Real, Shape, Tensor, Var};
use rand::Rng;

use crate::blocks::Builder;
use crate::error::{config_err, Error, FormatError, Result};
use crate::params::{BufferId, Graph, ParamId};

/// How the squared distances in the VQ loss are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VqNormalization {
    /// Divide by the number of vectors `N = B·H·W`.
    #[default]
    PerVector,
    /// Divide by the number of latent elements `N·D`.
    PerElement,
}

impl std::str::FromStr for VqNormalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_vector" => Ok(VqNormalization::PerVector),
            "per_element" => Ok(VqNormalization::PerElement),
            other => Err(config_err(format!("unknown VQ normalization {other:?} (per_vector|per_element)"))),
        }
    }
}

impl std::fmt::Display for VqNormalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VqNormalization::PerVector => "per_vector",
            VqNormalization::PerElement => "per_element",
        })
    }
}

/// Index of the codeword closest to `v` in squared Euclidean distance; ties
/// go to the lowest index. `table` holds `K` rows of `v.len()` values.
pub fn nearest_codeword<T: Real>(v: &[T], table: &[T]) -> Result<usize> {
    let d = v.len();
    if d == 0 || table.is_empty() || !table.len().is_multiple_of(d) {
        return Err(config_err(format!("codebook of {} values cannot hold {d}-vectors", table.len())));
    }
    let mut best = (0, T::infinity());
    for (k, row) in table.chunks_exact(d).enumerate() {
        let dist = v.iter().zip(row).fold(T::zero(), |acc, (&a, &e)| acc + (a - e) * (a - e));
        if dist < best.1 {
            best = (k, dist);
        }
    }
    Ok(best.0)
}

/// Assign every spatial vector of `z_e` (`(B, D, H, W)`) to its nearest row of
/// `table` (`(K, D, 1, 1)`). Returns indices in `(b, h, w)` row-major order
/// and the quantized tensor. Pure: no loss, gradient or usage update.
pub fn inference_quantize<T: Real>(z_e: &Tensor<T>, table: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, d, h, w] = z_e.shape().0;
    let [k, td, _, _] = table.shape().0;
    if k == 0 {
        return Err(config_err("empty codebook"));
    }
    if td != d {
        return Err(Error::Shape(format!("codebook dimension {td} does not match {d} channels")));
    }
    let plane = h * w;
    let src = z_e.data();
    let rows = table.data();
    let mut out = Tensor::zeros(z_e.shape());
    let mut indices = Vec::with_capacity(b * plane);
    let mut v = vec![T::zero(); d];
    for ib in 0..b {
        for p in 0..plane {
            for (ch, slot) in v.iter_mut().enumerate() {
                *slot = src[(ib * d + ch) * plane + p];
            }
            let idx = nearest_codeword(&v, rows)?;
            let dst = out.data_mut();
            for ch in 0..d {
                dst[(ib * d + ch) * plane + p] = rows[idx * d + ch];
            }
            indices.push(idx);
        }
    }
    Ok((out, indices))
}

/// Tape handles produced by [`Codebook::quantize`].
#[derive(Clone, Debug)]
pub struct VqOutput {
    /// Quantized map carrying the straight-through gradient to `z_e`.
    pub z_q: Var,
    pub indices: Vec<usize>,
    /// `codebook_term + commitment_term`.
    pub loss: Var,
    /// Moves only the codebook.
    pub codebook_term: Var,
    /// β-weighted; moves only the encoder output.
    pub commitment_term: Var,
}

/// Learnable `K × D` codebook plus diagnostic usage counters.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub table: ParamId,
    pub usage: BufferId,
    pub size: usize,
    pub dim: usize,
}

impl Codebook {
    /// Codewords drawn uniformly from `[-1/K, 1/K]`.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, size: usize, dim: usize) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(config_err(format!("codebook needs K >= 1 and D >= 1, got K={size}, D={dim}")));
        }
        let bound = 1.0 / size as f64;
        let rng = &mut *b.rng;
        let init = Tensor::from_fn(Shape::new(size, dim, 1, 1), |_| T::of_f64(rng.gen_range(-bound..=bound)));
        let table = b.params.add(format!("{name}.codebook"), init);
        let usage = b.buffers.add(format!("{name}.usage"), Tensor::zeros(Shape::new(size, 1, 1, 1)));
        Ok(Codebook { table, usage, size, dim })
    }

    /// Quantize `z_e` on the tape. Usage counters are recorded in training
    /// mode only.
    pub fn quantize<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        z_e: Var,
        beta: f64,
        norm: VqNormalization,
    ) -> Result<VqOutput> {
        if !(beta >= 0.0) {
            return Err(config_err(format!("commitment weight must be non-negative, got {beta}")));
        }
        let [b, _, h, w] = g.tape.shape(z_e).0;
        let table = g.param(self.table);
        let (zq_value, indices) = inference_quantize(g.tape.value(z_e), g.tape.value(table))?;
        let ze_value = g.tape.value(z_e).clone();
        let n = (b * h * w) as f64;
        let denom = match norm {
            VqNormalization::PerVector => n,
            VqNormalization::PerElement => n * self.dim as f64,
        };
        let inv = T::of_f64(1.0 / denom);

        // codebook term: gradient reaches the table only
        let gathered = g.tape.gather_rows(table, indices.clone(), (b, h, w))?;
        let codebook_term = g.tape.sq_dist_const(gathered, ze_value, inv)?;
        // commitment term: gradient reaches z_e only
        let commit = g.tape.sq_dist_const(z_e, zq_value.clone(), inv)?;
        let commitment_term = g.tape.scale(commit, T::of_f64(beta));
        let loss = g.tape.add(codebook_term, commitment_term)?;
        let z_q = g.tape.straight_through(z_e, zq_value)?;
        g.record_usage(self.usage, indices.clone());
        Ok(VqOutput { z_q, indices, loss, codebook_term, commitment_term })
    }
}

/// Write `k,d0..,usage` rows, one per codeword.
pub fn write_codebook_csv<T: Real>(out: &mut impl Write, table: &Tensor<T>, usage: &[T]) -> std::io::Result<()> {
    let [k, d, _, _] = table.shape().0;
    write!(out, "k")?;
    for j in 0..d {
        write!(out, ",d{j}")?;
    }
    writeln!(out, ",usage")?;
    for (i, row) in table.data().chunks_exact(d).enumerate().take(k) {
        write!(out, "{i}")?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out, ",{}", usage.get(i).copied().unwrap_or_else(T::zero))?;
    }
    Ok(())
}

/// Parse a codebook CSV back into the `(K, D, 1, 1)` table and usage counts.
pub fn parse_codebook_csv<T: Real + std::str::FromStr>(text: &str) -> Result<(Tensor<T>, Vec<T>)> {
    let malformed = |m: String| Error::Format(FormatError::Malformed(m));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| malformed("empty codebook CSV".into()))?.split(',').collect();
    if header.len() < 3 || header[0] != "k" || header[header.len() - 1] != "usage" {
        return Err(malformed(format!("unexpected codebook header {header:?}")));
    }
    let d = header.len() - 2;
    let mut values = Vec::new();
    let mut usage = Vec::new();
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d + 2 {
            return Err(malformed(format!("codebook row {row} has {} cells, expected {}", cells.len(), d + 2)));
        }
        if cells[0].trim().parse::<usize>().ok() != Some(row) {
            return Err(malformed(format!("codebook row {row} has index {:?}", cells[0])));
        }
        for cell in &cells[1..] {
            let v = cell.trim().parse::<T>().map_err(|_| malformed(format!("bad number {cell:?}")))?;
            values.push(v);
        }
        usage.push(values.pop().expect("usage cell"));
    }
    let k = usage.len();
    Ok((Tensor::from_vec(Shape::new(k, d, 1, 1), values)?, usage))
}

/// Write `b,h,w,k,v0..` rows: each pre-quantization vector with its index.
pub fn write_assignments_csv<T: Real>(out: &mut impl Write, z_e: &Tensor<T>, indices: &[usize]) -> Result<()> {
    let [b, d, h, w] = z_e.shape().0;
    if indices.len() != b * h * w {
        return Err(Error::Shape(format!("{} indices for a {b}x{h}x{w} map", indices.len())));
    }
    let io = |e| Error::io("<assignments>", e);
    write!(out, "b,h,w,k").map_err(io)?;
    for j in 0..d {
        write!(out, ",v{j}").map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    let plane = h * w;
    for ib in 0..b {
        for p in 0..plane {
            write!(out, "{ib},{},{},{}", p / w, p % w, indices[ib * plane + p]).map_err(io)?;
            for ch in 0..d {
                write!(out, ",{}", z_e.data()[(ib * d + ch) * plane + p]).map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
    }
    Ok(())
}
