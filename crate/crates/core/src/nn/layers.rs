//! Layer kernels. Each op has a forward that fills a cache and a backward
//! that consumes it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Shape, Tensor4};
use super::NnError;
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `groups` is 1 (dense) or equal to `in_c` and `out_c` (depthwise).
    Conv2d {
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Relu,
    Gelu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        in_f: usize,
        out_f: usize,
    },
    /// Active in training mode only.
    Dropout {
        rate: f64,
    },
    /// `x + body(x)`.
    Residual {
        body: Vec<LayerSpec>,
    },
}

impl LayerSpec {
    pub fn conv(in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d { in_c, out_c, kernel, stride, padding, groups: 1 }
    }

    pub fn depthwise(c: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d { in_c: c, out_c: c, kernel, stride: 1, padding, groups: c }
    }

    /// Parameter count of this layer alone (nested layers excluded).
    pub fn own_params(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_c, out_c, kernel, groups, .. } => out_c * (in_c / groups) * kernel * kernel + out_c,
            LayerSpec::Dense { in_f, out_f } => in_f * out_f + out_f,
            _ => 0,
        }
    }

    /// Fan-in used for He initialization.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_c, kernel, groups, .. } => (in_c / groups) * kernel * kernel,
            LayerSpec::Dense { in_f, .. } => in_f,
            _ => 0,
        }
    }

    /// Output shape for `input`, validating channel agreement and spatial
    /// extents.
    pub fn output_shape(&self, input: Shape) -> Result<Shape, NnError> {
        let mismatch = |what: String| Err(NnError::ShapeMismatch(what));
        match self {
            &LayerSpec::Conv2d { in_c, out_c, kernel, stride, padding, groups } => {
                if input.c != in_c {
                    return mismatch(format!("conv expects {in_c} channels, got {}", input.c));
                }
                if groups != 1 && !(groups == in_c && out_c == in_c) {
                    return mismatch(format!("unsupported conv groups {groups} for {in_c}->{out_c}"));
                }
                if stride == 0 || kernel == 0 {
                    return mismatch("conv kernel and stride must be positive".into());
                }
                let h = spatial(input.h, kernel, stride, padding);
                let w = spatial(input.w, kernel, stride, padding);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(Shape::new(out_c, h, w)),
                    _ => mismatch(format!("conv k={kernel} s={stride} p={padding} on {}x{}", input.h, input.w)),
                }
            }
            LayerSpec::Relu | LayerSpec::Gelu | LayerSpec::Dropout { .. } => Ok(input),
            &LayerSpec::MaxPool { kernel, stride } => match (spatial(input.h, kernel, stride, 0), spatial(input.w, kernel, stride, 0)) {
                (Some(h), Some(w)) if stride > 0 => Ok(Shape::new(input.c, h, w)),
                _ => mismatch(format!("maxpool k={kernel} s={stride} on {}x{}", input.h, input.w)),
            },
            LayerSpec::GlobalAvgPool => Ok(Shape::new(input.c, 1, 1)),
            LayerSpec::Flatten => Ok(Shape::new(input.len(), 1, 1)),
            &LayerSpec::Dense { in_f, out_f } => {
                if input.len() != in_f || input.h != 1 || input.w != 1 {
                    return mismatch(format!("dense expects {in_f} flat features, got {input:?}"));
                }
                Ok(Shape::new(out_f, 1, 1))
            }
            LayerSpec::Residual { body } => {
                let mut s = input;
                for l in body {
                    s = l.output_shape(s)?;
                }
                if s != input {
                    return mismatch(format!("residual body maps {input:?} to {s:?}"));
                }
                Ok(input)
            }
        }
    }
}

fn spatial(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub ih: usize,
    pub iw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let op = g.out_pixels();
    for ci in 0..g.in_c {
        let plane = &x[ci * g.ih * g.iw..(ci + 1) * g.ih * g.iw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut col[((ci * g.k + ky) * g.k + kx) * op..][..op];
                for oy in 0..g.oh {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.ih as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.iw..(iy as usize + 1) * g.iw];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        *d = if ix < 0 || ix >= g.iw as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let op = g.out_pixels();
    for ci in 0..g.in_c {
        let plane = &mut dx[ci * g.ih * g.iw..(ci + 1) * g.ih * g.iw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &col[((ci * g.k + ky) * g.k + kx) * op..][..op];
                for oy in 0..g.oh {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.ih as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.iw..(iy as usize + 1) * g.iw];
                    for ox in 0..g.ow {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        if ix >= 0 && (ix as usize) < g.iw {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(x: &Tensor4, params: &[f64], g: &ConvGeom, out: &mut Tensor4) {
    let pl = g.patch_len();
    let op = g.out_pixels();
    let (weights, bias) = params.split_at(g.out_c * pl);
    let mut col = vec![0.0; pl * op];
    for n in 0..x.n {
        im2col(x.sample(n), g, &mut col);
        let y = out.sample_mut(n);
        for (oc, plane) in y.chunks_exact_mut(op).enumerate() {
            plane.fill(bias[oc]);
        }
        gemm(g.out_c, pl, op, 1.0, weights, false, &col, false, 1.0, y);
    }
}

/// Accumulates weight/bias gradients into `grads` and writes `dx`.
pub(crate) fn conv_backward(x: &Tensor4, dy: &Tensor4, params: &[f64], g: &ConvGeom, grads: &mut [f64], dx: &mut Tensor4) {
    let pl = g.patch_len();
    let op = g.out_pixels();
    let weights = &params[..g.out_c * pl];
    let (gw, gb) = grads.split_at_mut(g.out_c * pl);
    let mut col = vec![0.0; pl * op];
    let mut dcol = vec![0.0; pl * op];
    dx.data.fill(0.0);
    for n in 0..x.n {
        let dyn_ = dy.sample(n);
        for (oc, plane) in dyn_.chunks_exact(op).enumerate() {
            gb[oc] += plane.iter().sum::<f64>();
        }
        im2col(x.sample(n), g, &mut col);
        // dW += dY · colᵀ
        gemm(g.out_c, op, pl, 1.0, dyn_, false, &col, true, 1.0, gw);
        // dcol = Wᵀ · dY
        gemm(pl, g.out_c, op, 1.0, weights, true, dyn_, false, 0.0, &mut dcol);
        col2im(&dcol, g, dx.sample_mut(n));
    }
}

pub(crate) fn depthwise_forward(x: &Tensor4, params: &[f64], g: &ConvGeom, out: &mut Tensor4) {
    let kk = g.k * g.k;
    let (weights, bias) = params.split_at(g.in_c * kk);
    for n in 0..x.n {
        let xs = x.sample(n);
        let ys = out.sample_mut(n);
        for c in 0..g.in_c {
            let xp = &xs[c * g.ih * g.iw..(c + 1) * g.ih * g.iw];
            let yp = &mut ys[c * g.oh * g.ow..(c + 1) * g.oh * g.ow];
            yp.fill(bias[c]);
            let wk = &weights[c * kk..(c + 1) * kk];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = wk[ky * g.k + kx];
                    let (lo, hi) = valid_range(g.ow, g.iw, g.s, g.p, kx);
                    for oy in 0..g.oh {
                        let iy = (oy * g.s + ky) as isize - g.p as isize;
                        if iy < 0 || iy >= g.ih as isize {
                            continue;
                        }
                        let src = &xp[iy as usize * g.iw..];
                        let dst = &mut yp[oy * g.ow..(oy + 1) * g.ow];
                        for ox in lo..hi {
                            dst[ox] += wv * src[ox * g.s + kx - g.p];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_backward(x: &Tensor4, dy: &Tensor4, params: &[f64], g: &ConvGeom, grads: &mut [f64], dx: &mut Tensor4) {
    let kk = g.k * g.k;
    let weights = &params[..g.in_c * kk];
    let (gw, gb) = grads.split_at_mut(g.in_c * kk);
    dx.data.fill(0.0);
    for n in 0..x.n {
        let xs = x.sample(n);
        let dys = dy.sample(n);
        let dxs = dx.sample_mut(n);
        for c in 0..g.in_c {
            let xp = &xs[c * g.ih * g.iw..(c + 1) * g.ih * g.iw];
            let dyp = &dys[c * g.oh * g.ow..(c + 1) * g.oh * g.ow];
            let dxp = &mut dxs[c * g.ih * g.iw..(c + 1) * g.ih * g.iw];
            gb[c] += dyp.iter().sum::<f64>();
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = weights[c * kk + ky * g.k + kx];
                    let (lo, hi) = valid_range(g.ow, g.iw, g.s, g.p, kx);
                    let mut acc = 0.0;
                    for oy in 0..g.oh {
                        let iy = (oy * g.s + ky) as isize - g.p as isize;
                        if iy < 0 || iy >= g.ih as isize {
                            continue;
                        }
                        let row = iy as usize * g.iw;
                        let d = &dyp[oy * g.ow..(oy + 1) * g.ow];
                        for ox in lo..hi {
                            let ix = row + ox * g.s + kx - g.p;
                            acc += d[ox] * xp[ix];
                            dxp[ix] += wv * d[ox];
                        }
                    }
                    gw[c * kk + ky * g.k + kx] += acc;
                }
            }
        }
    }
}

/// Output columns `ox` whose input column `ox*s + kx - p` is in bounds.
fn valid_range(ow: usize, iw: usize, s: usize, p: usize, kx: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < ow && lo * s + kx < p {
        lo += 1;
    }
    let mut hi = ow;
    while hi > lo && (hi - 1) * s + kx >= p + iw {
        hi -= 1;
    }
    (lo, hi)
}

pub(crate) fn dense_forward(x: &Tensor4, params: &[f64], in_f: usize, out_f: usize, out: &mut Tensor4) {
    let (w, b) = params.split_at(in_f * out_f);
    for n in 0..x.n {
        out.sample_mut(n).copy_from_slice(b);
    }
    // Y (n × out) = X (n × in) · Wᵀ
    gemm(x.n, in_f, out_f, 1.0, &x.data, false, w, true, 1.0, &mut out.data);
}

pub(crate) fn dense_backward(x: &Tensor4, dy: &Tensor4, params: &[f64], in_f: usize, out_f: usize, grads: &mut [f64], dx: &mut Tensor4) {
    let w = &params[..in_f * out_f];
    let (gw, gb) = grads.split_at_mut(in_f * out_f);
    for n in 0..dy.n {
        for (g, d) in gb.iter_mut().zip(dy.sample(n)) {
            *g += d;
        }
    }
    // dW (out × in) += dYᵀ · X
    gemm(out_f, dy.n, in_f, 1.0, &dy.data, true, &x.data, false, 1.0, gw);
    // dX (n × in) = dY · W
    gemm(dy.n, out_f, in_f, 1.0, &dy.data, false, w, false, 0.0, &mut dx.data);
}

pub(crate) fn maxpool_forward(x: &Tensor4, k: usize, s: usize, out: &mut Tensor4, argmax: &mut Vec<u32>) {
    let (ih, iw) = (x.shape.h, x.shape.w);
    let (oh, ow) = (out.shape.h, out.shape.w);
    argmax.clear();
    argmax.reserve(out.data.len());
    for n in 0..x.n {
        for c in 0..x.shape.c {
            let base = (n * x.shape.c + c) * ih * iw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = base + (oy * s + ky) * iw + ox * s + kx;
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    out.data[(n * x.shape.c + c) * oh * ow + oy * ow + ox] = best;
                    argmax.push(best_i as u32);
                }
            }
        }
    }
}

pub(crate) fn maxpool_backward(dy: &Tensor4, argmax: &[u32], dx: &mut Tensor4) {
    dx.data.fill(0.0);
    for (d, &i) in dy.data.iter().zip(argmax) {
        dx.data[i as usize] += d;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn global_avg_forward(x: &Tensor4, out: &mut Tensor4) {
    let hw = x.shape.h * x.shape.w;
    for (o, plane) in out.data.iter_mut().zip(x.data.chunks_exact(hw)) {
        *o = plane.iter().sum::<f64>() / hw as f64;
    }
}

pub(crate) fn global_avg_backward(dy: &Tensor4, dx: &mut Tensor4) {
    let hw = dx.shape.h * dx.shape.w;
    for (plane, d) in dx.data.chunks_exact_mut(hw).zip(&dy.data) {
        plane.fill(d / hw as f64);
    }
}

/// Inverted-dropout mask with survivors scaled by `1 / (1 - rate)`.
pub(crate) fn dropout_mask(len: usize, rate: f64, rng: &mut StreamRng) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
}

pub(crate) fn conv_geom(spec: &LayerSpec, input: Shape, output: Shape) -> ConvGeom {
    match *spec {
        LayerSpec::Conv2d { in_c, out_c, kernel, stride, padding, .. } => {
            ConvGeom { in_c, out_c, k: kernel, s: stride, p: padding, ih: input.h, iw: input.w, oh: output.h, ow: output.w }
        }
        _ => unreachable!("conv_geom on a non-conv layer"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spatial_formula() {
        assert_eq!(spatial(64, 4, 4, 0), Some(16));
        assert_eq!(spatial(16, 7, 1, 3), Some(16));
        assert_eq!(spatial(3, 2, 1, 0), Some(2));
        assert_eq!(spatial(1, 2, 2, 0), None);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for i in -40..40 {
            let x = i as f64 * 0.1;
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-7);
        }
    }

    #[test]
    fn valid_range_bounds() {
        // k=7, p=3, s=1 on width 16: kx=0 drops the first three outputs
        assert_eq!(valid_range(16, 16, 1, 3, 0), (3, 16));
        assert_eq!(valid_range(16, 16, 1, 3, 6), (0, 13));
        assert_eq!(valid_range(16, 16, 1, 3, 3), (0, 16));
    }
}
