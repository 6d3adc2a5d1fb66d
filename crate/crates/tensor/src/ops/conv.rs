//! Grouped 2-D convolution.
//!
//! Three kernels share one contract: pointwise (1×1, stride 1, no padding)
//! maps straight onto a GEMM per group, depthwise convs and convs with one or
//! two outputs per group use direct sliding-window loops, and everything else
//! goes through im2col + GEMM.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec { stride, padding, groups }
    }

    /// Stride 1 with `k / 2` padding: output keeps the input size for odd `k`.
    pub fn same(kernel: usize, groups: usize) -> Self {
        ConvSpec { stride: 1, padding: kernel / 2, groups }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: 1, padding: 0, groups: 1 }
    }
}

const DIRECT_MAX_OUTPUTS: usize = 2;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    /// Sliding-window loops instead of GEMM: depthwise convs and convs with
    /// very few outputs per group, where im2col costs more than it saves.
    fn is_direct(&self) -> bool {
        !self.is_pointwise() && (self.cin_g == 1 || self.cout_g <= DIRECT_MAX_OUTPUTS)
    }
}

fn geometry(x: Shape, w: Shape, spec: ConvSpec) -> Result<Geometry> {
    let [batch, cin, h, wd] = x.0;
    let [cout, cin_g, kh, kw] = w.0;
    if spec.stride == 0 {
        return shape_err("conv2d stride must be positive");
    }
    if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
        return shape_err(format!(
            "conv2d groups {} must divide input channels {cin} and output channels {cout}",
            spec.groups
        ));
    }
    if cin / spec.groups != cin_g {
        return shape_err(format!(
            "conv2d weight {w} expects {cin_g} channels per group, input {x} has {}",
            cin / spec.groups
        ));
    }
    if kh != kw || kh == 0 {
        return shape_err(format!("conv2d kernel must be square, got {kh}x{kw}"));
    }
    let padded_h = h + 2 * spec.padding;
    let padded_w = wd + 2 * spec.padding;
    if padded_h < kh || padded_w < kw {
        return shape_err(format!("conv2d kernel {kh} larger than padded input {x}"));
    }
    if !(padded_h - kh).is_multiple_of(spec.stride) || !(padded_w - kw).is_multiple_of(spec.stride) {
        return shape_err(format!(
            "conv2d stride {} and padding {} do not tile input {x}",
            spec.stride, spec.padding
        ));
    }
    Ok(Geometry {
        batch,
        cin,
        h,
        w: wd,
        cout,
        k: kh,
        ho: (padded_h - kh) / spec.stride + 1,
        wo: (padded_w - kw) / spec.stride + 1,
        cin_g,
        cout_g: cout / spec.groups,
        spec,
    })
}

pub fn output_shape(x: Shape, w: Shape, spec: ConvSpec) -> Result<Shape> {
    let g = geometry(x, w, spec)?;
    Ok(Shape::new(g.batch, g.cout, g.ho, g.wo))
}

/// Range of output columns `ox` whose tap `kx` lands inside the input row.
fn valid_range(kx: usize, pad: usize, stride: usize, w_in: usize, w_out: usize) -> (usize, usize) {
    // ix = ox * stride + kx - pad must satisfy 0 <= ix < w_in
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if w_in + pad > kx { (w_in + pad - kx).div_ceil(stride).min(w_out) } else { 0 };
    (lo, hi.max(lo))
}

fn depthwise_plane<T: Real>(g: &Geometry, input: &[T], kernel: &[T], out: &mut [T]) {
    let (k, s, p) = (g.k, g.spec.stride, g.spec.padding);
    for ky in 0..k {
        for kx in 0..k {
            let wv = kernel[ky * k + kx];
            let (lo, hi) = valid_range(kx, p, s, g.w, g.wo);
            if lo >= hi {
                continue;
            }
            for oy in 0..g.ho {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let in_row = &input[iy as usize * g.w..(iy as usize + 1) * g.w];
                let out_row = &mut out[oy * g.wo..(oy + 1) * g.wo];
                if s == 1 {
                    let start = lo + kx - p;
                    for (o, &i) in out_row[lo..hi].iter_mut().zip(&in_row[start..start + hi - lo]) {
                        *o = *o + wv * i;
                    }
                } else {
                    for ox in lo..hi {
                        out_row[ox] = out_row[ox] + wv * in_row[ox * s + kx - p];
                    }
                }
            }
        }
    }
}

fn depthwise_plane_backward<T: Real>(
    g: &Geometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut grad_in: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
) {
    let (k, s, p) = (g.k, g.spec.stride, g.spec.padding);
    for ky in 0..k {
        for kx in 0..k {
            let wv = kernel[ky * k + kx];
            let (lo, hi) = valid_range(kx, p, s, g.w, g.wo);
            if lo >= hi {
                continue;
            }
            let mut acc = T::zero();
            for oy in 0..g.ho {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let row = iy as usize * g.w;
                let gout = &grad_out[oy * g.wo + lo..oy * g.wo + hi];
                if s == 1 {
                    let start = row + lo + kx - p;
                    let inp = &input[start..start + hi - lo];
                    acc = acc + dot(gout, inp);
                    if let Some(gi) = grad_in.as_deref_mut() {
                        for (d, &go) in gi[start..start + hi - lo].iter_mut().zip(gout) {
                            *d = *d + wv * go;
                        }
                    }
                } else {
                    for (j, &go) in gout.iter().enumerate() {
                        let ix = row + (lo + j) * s + kx - p;
                        acc = acc + go * input[ix];
                        if let Some(gi) = grad_in.as_deref_mut() {
                            gi[ix] = gi[ix] + wv * go;
                        }
                    }
                }
            }
            if let Some(gk) = grad_kernel.as_deref_mut() {
                gk[ky * k + kx] = gk[ky * k + kx] + acc;
            }
        }
    }
}

/// Inner product with four independent partial sums.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

fn im2col<T: Real>(g: &Geometry, input: &[T], col: &mut [T]) {
    let (k, s, p) = (g.k, g.spec.stride, g.spec.padding);
    let plane_out = g.out_plane();
    for c in 0..g.cin_g {
        let in_plane = &input[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane_out..(row + 1) * plane_out];
                dst.fill(T::zero());
                let (lo, hi) = valid_range(kx, p, s, g.w, g.wo);
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in lo..hi {
                        dst[oy * g.wo + ox] = in_plane[base + ox * s + kx - p];
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &Geometry, col: &[T], grad_in: &mut [T]) {
    let (k, s, p) = (g.k, g.spec.stride, g.spec.padding);
    let plane_out = g.out_plane();
    for c in 0..g.cin_g {
        let gi = &mut grad_in[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane_out..(row + 1) * plane_out];
                let (lo, hi) = valid_range(kx, p, s, g.w, g.wo);
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in lo..hi {
                        let ix = base + ox * s + kx - p;
                        gi[ix] = gi[ix] + src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

pub fn forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return shape_err(format!("conv2d bias has {} values for {} outputs", b.numel(), g.cout));
        }
    }
    let mut out = Tensor::zeros(Shape::new(g.batch, g.cout, g.ho, g.wo));
    let (xs, ws) = (x.data(), weight.data());
    let ys = out.data_mut();
    let (pin, pout) = (g.in_plane(), g.out_plane());
    let wk = g.cin_g * g.k * g.k;
    let kk = g.k * g.k;
    let mut col = if g.is_pointwise() || g.is_direct() { Vec::new() } else { vec![T::zero(); wk * pout] };

    for b in 0..g.batch {
        for grp in 0..spec.groups {
            let x_off = (b * g.cin + grp * g.cin_g) * pin;
            let y_off = (b * g.cout + grp * g.cout_g) * pout;
            let w_off = grp * g.cout_g * wk;
            let y_g = &mut ys[y_off..y_off + g.cout_g * pout];
            let w_g = &ws[w_off..w_off + g.cout_g * wk];
            if g.is_direct() {
                for oc in 0..g.cout_g {
                    for ic in 0..g.cin_g {
                        depthwise_plane(
                            &g,
                            &xs[x_off + ic * pin..x_off + (ic + 1) * pin],
                            &w_g[oc * wk + ic * kk..oc * wk + (ic + 1) * kk],
                            &mut y_g[oc * pout..(oc + 1) * pout],
                        );
                    }
                }
            } else if g.is_pointwise() {
                let x_g = &xs[x_off..x_off + g.cin_g * pin];
                T::gemm(g.cout_g, g.cin_g, pin, T::one(), w_g, (wk as isize, 1), x_g, (pin as isize, 1), T::zero(), y_g, (pout as isize, 1));
            } else {
                im2col(&g, &xs[x_off..x_off + g.cin_g * pin], &mut col);
                T::gemm(g.cout_g, wk, pout, T::one(), w_g, (wk as isize, 1), &col, (pout as isize, 1), T::zero(), y_g, (pout as isize, 1));
            }
        }
        if let Some(bias) = bias {
            for (oc, &bv) in bias.data().iter().enumerate() {
                let off = (b * g.cout + oc) * pout;
                for v in &mut ys[off..off + pout] {
                    *v = *v + bv;
                }
            }
        }
    }
    Ok(out)
}

/// Accumulates (`+=`) gradients into whichever buffers are supplied.
pub fn backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: ConvSpec,
    grad_out: &[T],
    mut grad_x: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) -> Result<()> {
    let g = geometry(x.shape(), weight.shape(), spec)?;
    let (xs, ws) = (x.data(), weight.data());
    let (pin, pout) = (g.in_plane(), g.out_plane());
    let wk = g.cin_g * g.k * g.k;

    if let Some(gb) = grad_b {
        for b in 0..g.batch {
            for (oc, acc) in gb.iter_mut().enumerate() {
                let off = (b * g.cout + oc) * pout;
                *acc = *acc + grad_out[off..off + pout].iter().copied().sum::<T>();
            }
        }
    }
    if grad_x.is_none() && grad_w.is_none() {
        return Ok(());
    }

    let kk = g.k * g.k;
    let general = !(g.is_pointwise() || g.is_direct());
    let mut col = if general { vec![T::zero(); wk * pout] } else { Vec::new() };
    let mut gcol = if general && grad_x.is_some() { vec![T::zero(); wk * pout] } else { Vec::new() };

    for b in 0..g.batch {
        for grp in 0..spec.groups {
            let x_off = (b * g.cin + grp * g.cin_g) * pin;
            let y_off = (b * g.cout + grp * g.cout_g) * pout;
            let w_off = grp * g.cout_g * wk;
            let gy = &grad_out[y_off..y_off + g.cout_g * pout];
            let w_g = &ws[w_off..w_off + g.cout_g * wk];
            let x_g = &xs[x_off..x_off + g.cin_g * pin];

            if g.is_direct() {
                for oc in 0..g.cout_g {
                    for ic in 0..g.cin_g {
                        let (xi, ki) = (x_off + ic * pin, oc * wk + ic * kk);
                        let gi = grad_x.as_deref_mut().map(|gx| &mut gx[xi..xi + pin]);
                        let gk = grad_w.as_deref_mut().map(|gw| &mut gw[w_off + ki..w_off + ki + kk]);
                        depthwise_plane_backward(
                            &g,
                            &x_g[ic * pin..(ic + 1) * pin],
                            &w_g[ki..ki + kk],
                            &gy[oc * pout..(oc + 1) * pout],
                            gi,
                            gk,
                        );
                    }
                }
            } else if g.is_pointwise() {
                if let Some(gw) = grad_w.as_deref_mut() {
                    // dW += dY · Xᵀ
                    T::gemm(g.cout_g, pin, g.cin_g, T::one(), gy, (pout as isize, 1), x_g, (1, pin as isize), T::one(), &mut gw[w_off..w_off + g.cout_g * wk], (wk as isize, 1));
                }
                if let Some(gx) = grad_x.as_deref_mut() {
                    // dX += Wᵀ · dY
                    T::gemm(g.cin_g, g.cout_g, pin, T::one(), w_g, (1, wk as isize), gy, (pout as isize, 1), T::one(), &mut gx[x_off..x_off + g.cin_g * pin], (pin as isize, 1));
                }
            } else {
                im2col(&g, x_g, &mut col);
                if let Some(gw) = grad_w.as_deref_mut() {
                    T::gemm(g.cout_g, pout, wk, T::one(), gy, (pout as isize, 1), &col, (1, pout as isize), T::one(), &mut gw[w_off..w_off + g.cout_g * wk], (wk as isize, 1));
                }
                if let Some(gx) = grad_x.as_deref_mut() {
                    T::gemm(wk, g.cout_g, pout, T::one(), w_g, (1, wk as isize), gy, (pout as isize, 1), T::zero(), &mut gcol, (pout as isize, 1));
                    col2im_add(&g, &gcol, &mut gx[x_off..x_off + g.cin_g * pin]);
                }
            }
        }
    }
    Ok(())
}
