//! Regression and rain/no-rain classification scores, and the persistence
//! baseline.

use std::io::Write;

use qmix_tensor::Real;

use crate::data::{Dataset, NowcastSample};
use crate::error::{Error, Result};
use crate::model::Model;

/// Pixel counts of a binarized prediction against a binarized target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    /// Count pixels; a pixel is rainy when its value is at least `threshold`.
    pub fn from_maps(pred: &[f32], target: &[f32], threshold: f32) -> Self {
        let mut c = ConfusionCounts::default();
        c.add_maps(pred, target, threshold);
        c
    }

    pub fn add_maps(&mut self, pred: &[f32], target: &[f32], threshold: f32) {
        debug_assert_eq!(pred.len(), target.len());
        for (&p, &t) in pred.iter().zip(target) {
            match (p >= threshold, t >= threshold) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, false) => self.tn += 1,
                (false, true) => self.fn_ += 1,
            }
        }
    }

    pub fn merge(self, other: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub mse: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn from_parts(sum_sq: f64, pixels: u64, counts: ConfusionCounts) -> Self {
        MetricsReport {
            mse: if pixels == 0 { 0.0 } else { sum_sq / pixels as f64 },
            precision: counts.precision(),
            recall: counts.recall(),
            accuracy: counts.accuracy(),
            f1: counts.f1(),
            counts,
        }
    }
}

/// The last input frame, unchanged.
pub fn persistence_forecast(sample: &NowcastSample) -> Vec<f32> {
    sample.last_input().to_vec()
}

/// What produces the forecasts being scored.
pub enum Forecaster<'a, T: Real> {
    Model(&'a Model<T>),
    Persistence,
}

/// Score forecasts over `data`, pooling pixel counts across all samples.
pub fn evaluate<T: Real>(
    forecaster: &Forecaster<'_, T>,
    data: &Dataset,
    rain_threshold: f32,
    batch_size: usize,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    if !(rain_threshold > 0.0 && rain_threshold < 1.0) {
        return Err(Error::Config(format!("rain threshold {rain_threshold} must lie in (0, 1)")));
    }
    let mut counts = ConfusionCounts::default();
    let mut sum_sq = 0.0f64;
    let mut pixels = 0u64;
    let mut score = |pred: &[f32], target: &[f32]| {
        counts.add_maps(pred, target, rain_threshold);
        sum_sq += pred.iter().zip(target).map(|(&p, &t)| (p as f64 - t as f64).powi(2)).sum::<f64>();
        pixels += target.len() as u64;
    };
    match forecaster {
        Forecaster::Persistence => {
            for s in &data.samples {
                score(&persistence_forecast(s), &s.target);
            }
        }
        Forecaster::Model(model) => {
            let idx: Vec<usize> = (0..data.len()).collect();
            for chunk in idx.chunks(batch_size.max(1)) {
                let (x, y) = data.batch(chunk)?;
                let pred: Vec<f32> = model.predict(&x.cast())?.data().iter().map(|v| v.as_f64() as f32).collect();
                score(&pred, y.data());
            }
        }
    }
    Ok(MetricsReport::from_parts(sum_sq, pixels, counts))
}

pub const METRICS_HEADER: &str = "model,mse,precision,recall,accuracy,f1";

pub fn write_metrics_csv(out: &mut impl Write, rows: &[(String, MetricsReport)]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for (name, r) in rows {
        writeln!(out, "{name},{},{},{},{},{}", r.mse, r.precision, r.recall, r.accuracy, r.f1)?;
    }
    Ok(())
}
