//! Per-channel batch normalization kernels.

use crate::tensor::{Real, Tensor};

/// Values kept from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch mean per channel.
    pub mean: Vec<T>,
    /// Biased batch variance per channel.
    pub var: Vec<T>,
}

fn for_each_channel_plane<T: Real>(x: &Tensor<T>, mut f: impl FnMut(usize, std::ops::Range<usize>)) {
    let [b, c, _, _] = x.shape().0;
    let plane = x.shape().plane();
    for ib in 0..b {
        for ic in 0..c {
            let off = (ib * c + ic) * plane;
            f(ic, off..off + plane);
        }
    }
}

pub fn forward_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor<T>, BatchNormSaved<T>) {
    let channels = x.shape().channels();
    let count = T::of_f64((x.numel() / channels.max(1)) as f64);
    let data = x.data();

    let mut mean = vec![T::zero(); channels];
    for_each_channel_plane(x, |c, r| mean[c] = mean[c] + data[r].iter().copied().sum::<T>());
    mean.iter_mut().for_each(|m| *m = *m / count);

    let mut var = vec![T::zero(); channels];
    for_each_channel_plane(x, |c, r| {
        let m = mean[c];
        var[c] = var[c] + data[r].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
    });
    var.iter_mut().for_each(|v| *v = *v / count);

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); x.numel()];
    let mut out = Tensor::zeros(x.shape());
    let ys = out.data_mut();
    for_each_channel_plane(x, |c, r| {
        let (m, s, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
        for i in r {
            let n = (data[i] - m) * s;
            normalized[i] = n;
            ys[i] = g * n + b;
        }
    });
    (out, BatchNormSaved { normalized, inv_std, mean, var })
}

/// Gradients of training-mode normalization, accumulated into the buffers.
pub fn backward_train<T: Real>(
    x: &Tensor<T>,
    saved: &BatchNormSaved<T>,
    gamma: &[T],
    grad_out: &[T],
    grad_x: Option<&mut [T]>,
    grad_gamma: Option<&mut [T]>,
    grad_beta: Option<&mut [T]>,
) {
    let channels = x.shape().channels();
    let count = T::of_f64((x.numel() / channels.max(1)) as f64);
    let n = &saved.normalized;

    let mut sum_g = vec![T::zero(); channels];
    let mut sum_gn = vec![T::zero(); channels];
    for_each_channel_plane(x, |c, r| {
        for i in r {
            sum_g[c] = sum_g[c] + grad_out[i];
            sum_gn[c] = sum_gn[c] + grad_out[i] * n[i];
        }
    });
    if let Some(gg) = grad_gamma {
        gg.iter_mut().zip(&sum_gn).for_each(|(a, &v)| *a = *a + v);
    }
    if let Some(gb) = grad_beta {
        gb.iter_mut().zip(&sum_g).for_each(|(a, &v)| *a = *a + v);
    }
    if let Some(gx) = grad_x {
        for_each_channel_plane(x, |c, r| {
            let scale = gamma[c] * saved.inv_std[c] / count;
            let (sg, sgn) = (sum_g[c], sum_gn[c]);
            for i in r {
                gx[i] = gx[i] + scale * (count * grad_out[i] - sg - n[i] * sgn);
            }
        });
    }
}

pub fn forward_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    let data = x.data();
    let ys = out.data_mut();
    for_each_channel_plane(x, |c, r| {
        let (m, s, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
        for i in r {
            ys[i] = g * (data[i] - m) * s + b;
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn backward_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    grad_out: &[T],
    mut grad_x: Option<&mut [T]>,
    mut grad_gamma: Option<&mut [T]>,
    mut grad_beta: Option<&mut [T]>,
) {
    let data = x.data();
    for_each_channel_plane(x, |c, r| {
        let (m, s, g) = (mean[c], inv_std[c], gamma[c]);
        for i in r {
            let go = grad_out[i];
            if let Some(gx) = grad_x.as_deref_mut() {
                gx[i] = gx[i] + go * g * s;
            }
            if let Some(gg) = grad_gamma.as_deref_mut() {
                gg[c] = gg[c] + go * (data[i] - m) * s;
            }
            if let Some(gb) = grad_beta.as_deref_mut() {
                gb[c] = gb[c] + go;
            }
        }
    });
}
