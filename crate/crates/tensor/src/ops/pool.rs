//! Resampling and reduction kernels: 2×2 max pooling, ×2 bilinear
//! upsampling, and pooled descriptors over the spatial or channel axis.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Shape, Tensor};

/// 2×2 max pool, stride 2. Returns the output and the flat input index of
/// each window maximum (the lowest index wins ties).
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [b, c, h, w] = x.shape().0;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("max_pool2 needs even spatial dims, got {}", x.shape()));
    }
    let (ho, wo) = (h / 2, w / 2);
    let shape = Shape::new(b, c, ho, wo);
    let mut out = Vec::with_capacity(shape.numel());
    let mut argmax = Vec::with_capacity(shape.numel());
    let data = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if data[cand] > data[best] {
                        best = cand;
                    }
                }
                out.push(data[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_vec(shape, out)?, argmax))
}

/// Interpolation taps along one axis for ×2 upsampling with half-pixel
/// centres: `src = (dst + 0.5) / 2 - 0.5`, clamped at the low edge.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    w_lo: T,
    w_hi: T,
}

fn taps<T: Real>(n: usize) -> Vec<Tap<T>> {
    (0..2 * n)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = src.floor() as usize;
            let frac = src - lo as f64;
            let hi = (lo + 1).min(n - 1);
            Tap { lo, hi, w_lo: T::of_f64(1.0 - frac), w_hi: T::of_f64(frac) }
        })
        .collect()
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape().0;
    let (ty, tx) = (taps::<T>(h), taps::<T>(w));
    let shape = Shape::new(b, c, 2 * h, 2 * w);
    let mut out = Vec::with_capacity(shape.numel());
    let data = x.data();
    for plane in 0..b * c {
        let src = &data[plane * h * w..(plane + 1) * h * w];
        for y in &ty {
            let (r0, r1) = (&src[y.lo * w..(y.lo + 1) * w], &src[y.hi * w..(y.hi + 1) * w]);
            for t in &tx {
                let top = t.w_lo * r0[t.lo] + t.w_hi * r0[t.hi];
                let bottom = t.w_lo * r1[t.lo] + t.w_hi * r1[t.hi];
                out.push(y.w_lo * top + y.w_hi * bottom);
            }
        }
    }
    Tensor::from_vec(shape, out).expect("upsample2 shape")
}

/// Adjoint of [`upsample2`], accumulated into `grad_in` (input-shaped).
pub fn upsample2_backward<T: Real>(in_shape: Shape, grad_out: &[T], grad_in: &mut [T]) {
    let [b, c, h, w] = in_shape.0;
    let (ty, tx) = (taps::<T>(h), taps::<T>(w));
    let wo = 2 * w;
    for plane in 0..b * c {
        let gi = &mut grad_in[plane * h * w..(plane + 1) * h * w];
        let go = &grad_out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, t) in tx.iter().enumerate() {
                let g = go[oy * wo + ox];
                let (gt, gb) = (y.w_lo * g, y.w_hi * g);
                gi[y.lo * w + t.lo] = gi[y.lo * w + t.lo] + gt * t.w_lo;
                gi[y.lo * w + t.hi] = gi[y.lo * w + t.hi] + gt * t.w_hi;
                gi[y.hi * w + t.lo] = gi[y.hi * w + t.lo] + gb * t.w_lo;
                gi[y.hi * w + t.hi] = gi[y.hi * w + t.hi] + gb * t.w_hi;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Pool over `H × W`, giving `(B, C, 1, 1)`.
    Spatial,
    /// Pool over `C`, giving `(B, 1, H, W)`.
    Channel,
}

pub fn reduced_shape(shape: Shape, axis: Axis) -> Shape {
    let [b, c, h, w] = shape.0;
    match axis {
        Axis::Spatial => Shape::new(b, c, 1, 1),
        Axis::Channel => Shape::new(b, 1, h, w),
    }
}

/// For each output element, the input indices that feed it.
fn groups(shape: Shape, axis: Axis) -> impl Iterator<Item = (usize, Vec<usize>)> {
    let [_, c, h, w] = shape.0;
    let plane = h * w;
    let out = reduced_shape(shape, axis).numel();
    (0..out).map(move |o| {
        let members = match axis {
            Axis::Spatial => (o * plane..(o + 1) * plane).collect(),
            Axis::Channel => {
                let (ib, p) = (o / plane, o % plane);
                (0..c).map(|ic| (ib * c + ic) * plane + p).collect()
            }
        };
        (o, members)
    })
}

/// Returns the reduced tensor and, for `Max`, the winning input index per output.
pub fn reduce<T: Real>(x: &Tensor<T>, axis: Axis, op: Reduce) -> (Tensor<T>, Vec<u32>) {
    let shape = reduced_shape(x.shape(), axis);
    let data = x.data();
    let mut out = vec![T::zero(); shape.numel()];
    let mut argmax = Vec::new();
    if axis == Axis::Spatial && op == Reduce::Mean {
        let plane = x.shape().plane();
        let n = T::of_f64(plane as f64);
        for (o, v) in out.iter_mut().enumerate() {
            *v = data[o * plane..(o + 1) * plane].iter().copied().sum::<T>() / n;
        }
        return (Tensor::from_vec(shape, out).expect("reduce shape"), argmax);
    }
    for (o, members) in groups(x.shape(), axis) {
        match op {
            Reduce::Mean => {
                let n = T::of_f64(members.len() as f64);
                out[o] = members.iter().map(|&i| data[i]).sum::<T>() / n;
            }
            Reduce::Max => {
                let mut best = members[0];
                for &i in &members[1..] {
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                out[o] = data[best];
                argmax.push(best as u32);
            }
        }
    }
    (Tensor::from_vec(shape, out).expect("reduce shape"), argmax)
}

pub fn reduce_backward<T: Real>(
    in_shape: Shape,
    axis: Axis,
    op: Reduce,
    argmax: &[u32],
    grad_out: &[T],
    grad_in: &mut [T],
) {
    match op {
        Reduce::Max => {
            for (&i, &g) in argmax.iter().zip(grad_out) {
                grad_in[i as usize] = grad_in[i as usize] + g;
            }
        }
        Reduce::Mean => {
            let n = match axis {
                Axis::Spatial => in_shape.plane(),
                Axis::Channel => in_shape.channels(),
            };
            let inv = T::one() / T::of_f64(n as f64);
            for (o, members) in groups(in_shape, axis) {
                let g = grad_out[o] * inv;
                for i in members {
                    grad_in[i] = grad_in[i] + g;
                }
            }
        }
    }
}
