//! Grid search over codebook size and commitment weight.

use std::io::Write;

use crate::data::Dataset;
use crate::error::{config_err, Result};
use crate::model::{Model, ModelConfig};
use crate::train::{eval_loss, train, TrainConfig};

pub const GRID_K: [usize; 4] = [8, 16, 32, 64];
pub const GRID_BETA: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Validation MSE per `(K, β)` cell; `NaN` marks a failed run.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub ks: Vec<usize>,
    pub betas: Vec<f64>,
    /// `cells[i][j]` is the run with `ks[i]` and `betas[j]`.
    pub cells: Vec<Vec<f64>>,
    /// Diagnostics of failed cells.
    pub failures: Vec<(usize, f64, String)>,
}

impl Grid {
    /// Position and value of the lowest finite cell.
    pub fn argmin(&self) -> Option<(usize, f64, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for (i, row) in self.cells.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v.is_finite() && best.is_none_or(|b| v < b.2) {
                    best = Some((self.ks[i], self.betas[j], v));
                }
            }
        }
        best
    }

    pub fn nan_cells(&self) -> usize {
        self.cells.iter().flatten().filter(|v| v.is_nan()).count()
    }

    /// First row holds the β values, first column the K values.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        write!(out, "k\\beta")?;
        for b in &self.betas {
            write!(out, ",{b}")?;
        }
        writeln!(out)?;
        for (k, row) in self.ks.iter().zip(&self.cells) {
            write!(out, "{k}")?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Train one model per `(K, β)` with the same data, seeds and budget, and
/// record the validation MSE of each run's best epoch.
#[allow(clippy::too_many_arguments)]
pub fn tune_vq(
    base: &ModelConfig,
    init_seed: u64,
    train_cfg: &TrainConfig,
    ks: &[usize],
    betas: &[f64],
    train_set: &Dataset,
    val_set: &Dataset,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<Grid> {
    if !base.variant.has_vq() {
        return Err(config_err(format!("tune-vq needs a VQ variant, got {}", base.variant)));
    }
    let mut grid = Grid { ks: ks.to_vec(), betas: betas.to_vec(), cells: Vec::new(), failures: Vec::new() };
    for &k in ks {
        let mut row = Vec::with_capacity(betas.len());
        for &beta in betas {
            let mut cfg = base.clone();
            cfg.vq.codebook_size = k;
            cfg.vq.beta = beta;
            let run = || -> Result<f64> {
                let mut model = Model::<f32>::build(&cfg, init_seed)?;
                train(&mut model, train_set, val_set, train_cfg)?;
                Ok(eval_loss(&model, val_set, train_cfg.batch_size)?.mse)
            };
            let value = match run() {
                Ok(v) if v.is_finite() => v,
                Ok(v) => {
                    grid.failures.push((k, beta, format!("non-finite validation MSE {v}")));
                    f64::NAN
                }
                Err(e) => {
                    grid.failures.push((k, beta, e.to_string()));
                    f64::NAN
                }
            };
            progress(k, beta, value);
            row.push(value);
        }
        grid.cells.push(row);
    }
    Ok(grid)
}
