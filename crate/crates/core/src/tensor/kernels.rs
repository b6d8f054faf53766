//! Raw forward/backward kernels on flat buffers.

use super::{ConvSpec, Real, Shape};

/// Output extent of a convolution along one axis, `None` when nothing fits.
pub(crate) fn conv_out_extent(input: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    let span = spec.dilation * (kernel - 1) + 1;
    let padded = input + 2 * spec.pad;
    if padded < span {
        return None;
    }
    let out = (padded - span) / spec.stride + 1;
    (out > 0).then_some(out)
}

pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1 stride-1 unpadded convolutions read the input plane directly.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }
}

/// Range of output columns whose sampled input column lies inside `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let (s, p, d) = (g.spec.stride as isize, g.spec.pad as isize, g.spec.dilation as isize);
    let off = kj as isize * d - p;
    // smallest ox with ox*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // largest ox with ox*s + off <= w - 1
    let hi = (g.w as isize - 1 - off).div_euclid(s) + 1;
    let lo = lo.clamp(0, g.ow as isize) as usize;
    let hi = hi.clamp(0, g.ow as isize) as usize;
    (lo, hi.max(lo))
}

/// Unfolds one image `[c, h, w]` into `[c·kh·kw, oh·ow]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (s, p, d) = (g.spec.stride as isize, g.spec.pad as isize, g.spec.dilation as isize);
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(g, kj);
                let off = kj as isize * d - p;
                for oy in 0..g.oh {
                    let iy = oy as isize * s - p + ki as isize * d;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let ix0 = (lo as isize * s + off) as usize;
                    if s == 1 {
                        out_row[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (k, o) in out_row[lo..hi].iter_mut().enumerate() {
                            *o = src[ix0 + k * s as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Folds `[c·kh·kw, oh·ow]` columns back into an image, accumulating.
pub(crate) fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (s, p, d) = (g.spec.stride as isize, g.spec.pad as isize, g.spec.dilation as isize);
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                let off = kj as isize * d - p;
                let ix0 = (lo as isize * s + off) as usize;
                for oy in 0..g.oh {
                    let iy = oy as isize * s - p + ki as isize * d;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if s == 1 {
                        for (o, &v) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(srow) {
                            *o = *o + v;
                        }
                    } else {
                        for (k, &v) in srow.iter().enumerate() {
                            let i = ix0 + k * s as usize;
                            dst[i] = dst[i] + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    xs: Shape,
    weight: &[T],
    out_c: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (k, p) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); xs.n * out_c * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let in_per = xs.c * xs.plane();
    for n in 0..xs.n {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let b: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        let on = &mut out[n * out_c * p..(n + 1) * out_c * p];
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                on[oc * p..(oc + 1) * p].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            out_c,
            k,
            p,
            T::one(),
            weight,
            (k as isize, 1),
            b,
            (p as isize, 1),
            beta,
            on,
            (p as isize, 1),
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    xs: Shape,
    weight: &[T],
    out_c: usize,
    grad_out: &[T],
    g: &ConvGeom,
    want: (bool, bool, bool),
    flip_input_grad: bool,
) -> ConvGrads<T> {
    let (k, p) = (g.rows(), g.cols());
    let in_per = xs.c * xs.plane();
    let mut gx = want.0.then(|| vec![T::zero(); x.len()]);
    let mut gw = want.1.then(|| vec![T::zero(); weight.len()]);
    let gb = want.2.then(|| {
        let mut gb = vec![T::zero(); out_c];
        for n in 0..xs.n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                let start = (n * out_c + oc) * p;
                *acc = grad_out[start..start + p].iter().fold(*acc, |a, &v| a + v);
            }
        }
        gb
    });
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
    for n in 0..xs.n {
        let dout = &grad_out[n * out_c * p..(n + 1) * out_c * p];
        if let Some(gw) = gw.as_mut() {
            let xn = &x[n * in_per..(n + 1) * in_per];
            let b: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            // dW += dOut · colsᵀ
            T::gemm(
                out_c,
                p,
                k,
                T::one(),
                dout,
                (p as isize, 1),
                b,
                (1, p as isize),
                T::one(),
                gw,
                (k as isize, 1),
            );
        }
        if let Some(gx) = gx.as_mut() {
            let gxn = &mut gx[n * in_per..(n + 1) * in_per];
            let alpha = if flip_input_grad { -T::one() } else { T::one() };
            if g.is_pointwise() {
                T::gemm(
                    k,
                    out_c,
                    p,
                    alpha,
                    weight,
                    (1, k as isize),
                    dout,
                    (p as isize, 1),
                    T::one(),
                    gxn,
                    (p as isize, 1),
                );
            } else {
                T::gemm(
                    k,
                    out_c,
                    p,
                    alpha,
                    weight,
                    (1, k as isize),
                    dout,
                    (p as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (p as isize, 1),
                );
                col2im_add(&dcols, g, gxn);
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Align-corners source coordinates for one axis: `(low index, high index, high weight)`.
pub(crate) fn bilinear_axis<T: Real>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    (0..output)
        .map(|o| {
            if output == 1 || input == 1 {
                return (0, 0, T::zero());
            }
            let src = o as f64 * (input - 1) as f64 / (output - 1) as f64;
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, T::from_f64_lossy(src - lo as f64))
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Real>(x: &[T], xs: Shape, oh: usize, ow: usize) -> Vec<T> {
    let ys = bilinear_axis::<T>(xs.h, oh);
    let xs_axis = bilinear_axis::<T>(xs.w, ow);
    let planes = xs.n * xs.c;
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * xs.plane()..(pl + 1) * xs.plane()];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &src[y0 * xs.w..(y0 + 1) * xs.w];
            let r1 = &src[y1 * xs.w..(y1 + 1) * xs.w];
            for (ox, &(x0, x1, fx)) in xs_axis.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Real>(grad_out: &[T], xs: Shape, oh: usize, ow: usize) -> Vec<T> {
    let ys = bilinear_axis::<T>(xs.h, oh);
    let xs_axis = bilinear_axis::<T>(xs.w, ow);
    let planes = xs.n * xs.c;
    let mut gx = vec![T::zero(); xs.len()];
    let one = T::one();
    for pl in 0..planes {
        let src = &grad_out[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut gx[pl * xs.plane()..(pl + 1) * xs.plane()];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs_axis.iter().enumerate() {
                let g = src[oy * ow + ox];
                let gt = g * (one - fy);
                let gb = g * fy;
                dst[y0 * xs.w + x0] = dst[y0 * xs.w + x0] + gt * (one - fx);
                dst[y0 * xs.w + x1] = dst[y0 * xs.w + x1] + gt * fx;
                dst[y1 * xs.w + x0] = dst[y1 * xs.w + x0] + gb * (one - fx);
                dst[y1 * xs.w + x1] = dst[y1 * xs.w + x1] + gb * fx;
            }
        }
    }
    gx
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub(crate) fn channel_moments<T: Real>(x: &[T], s: Shape) -> (Vec<T>, Vec<T>) {
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let planes = || (0..s.n).flat_map(move |n| {
            let start = (n * s.c + c) * s.plane();
            x[start..start + s.plane()].iter().map(|v| v.as_f64())
        });
        let m = planes().sum::<f64>() / count;
        let sq: f64 = planes().map(|v| (v - m) * (v - m)).sum();
        mean[c] = T::from_f64_lossy(m);
        var[c] = T::from_f64_lossy(sq / count);
    }
    (mean, var)
}

/// Calls `f(channel, range)` for every contiguous channel plane of a batch.
pub(crate) fn for_each_plane(s: Shape, mut f: impl FnMut(usize, std::ops::Range<usize>)) {
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * s.plane();
            f(c, start..start + s.plane());
        }
    }
}
