//! Forward and adjoint kernels for every graph primitive.

use rustfft::num_complex::Complex;

use super::tensor::{Scalar, Shape, Tensor};
use crate::fft::Fft2d;
use crate::imgcore::resample::lerp_taps;

// ---- conv2d (3×3, stride 1, zero padding 1) ----

/// Unfold one `(cin, h, w)` plane set into a `(cin·9) × (h·w)` matrix.
fn im2col<T: Scalar>(x: &[T], cin: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..cin {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                let x_lo = if kx == 0 { 1 } else { 0 };
                let x_hi = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    if x_lo == 1 {
                        dst[0] = T::zero();
                    }
                    if x_hi == w - 1 {
                        dst[w - 1] = T::zero();
                    }
                    let shift = kx as isize - 1;
                    let s0 = (x_lo as isize + shift) as usize;
                    let n = x_hi - x_lo;
                    dst[x_lo..x_hi].copy_from_slice(&srow[s0..s0 + n]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate a column matrix back onto planes.
fn col2im<T: Scalar>(col: &[T], cin: usize, h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    for ci in 0..cin {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                let x_lo = if kx == 0 { 1 } else { 0 };
                let x_hi = if kx == 2 { w - 1 } else { w };
                let shift = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w + x_lo..y * w + x_hi];
                    let s0 = (x_lo as isize + shift) as usize;
                    let drow = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + src.len()];
                    for (d, &s) in drow.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, wt: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let [b, cin, h, w] = x.shape;
    let cout = wt.shape[0];
    let (hw, k) = (h * w, cin * 9);
    let mut out = Tensor::zeros([b, cout, h, w]);
    let mut col = vec![T::zero(); k * hw];
    for bi in 0..b {
        im2col(&x.data[bi * cin * hw..(bi + 1) * cin * hw], cin, h, w, &mut col);
        let o = &mut out.data[bi * cout * hw..(bi + 1) * cout * hw];
        for (co, chunk) in o.chunks_mut(hw).enumerate() {
            chunk.fill(bias.data[co]);
        }
        T::gemm(cout, k, hw, T::one(), &wt.data, (k as isize, 1), &col, (hw as isize, 1), T::one(), o);
    }
    out
}

/// Gradients with respect to input (when requested), weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    gout: &Tensor<T>,
    need_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [b, cin, h, w] = x.shape;
    let cout = wt.shape[0];
    let (hw, k) = (h * w, cin * 9);
    let mut gw = Tensor::zeros(wt.shape);
    let mut gb = Tensor::zeros([cout, 1, 1, 1]);
    let mut gx = need_x.then(|| Tensor::zeros(x.shape));
    let mut col = vec![T::zero(); k * hw];
    for bi in 0..b {
        let g = &gout.data[bi * cout * hw..(bi + 1) * cout * hw];
        for (co, chunk) in g.chunks(hw).enumerate() {
            let s = chunk.iter().fold(T::zero(), |a, &v| a + v);
            gb.data[co] = gb.data[co] + s;
        }
        im2col(&x.data[bi * cin * hw..(bi + 1) * cin * hw], cin, h, w, &mut col);
        // gW += gout · colᵀ
        T::gemm(cout, hw, k, T::one(), g, (hw as isize, 1), &col, (1, hw as isize), T::one(), &mut gw.data);
        if let Some(gx) = gx.as_mut() {
            // gcol = Wᵀ · gout
            T::gemm(k, cout, hw, T::one(), &wt.data, (1, k as isize), g, (hw as isize, 1), T::zero(), &mut col);
            col2im(&col, cin, h, w, &mut gx.data[bi * cin * hw..(bi + 1) * cin * hw]);
        }
    }
    (gx, gw, gb)
}

// ---- broadcasting pointwise ops ----

pub fn broadcast_shape(a: &Shape, b: &Shape) -> Option<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn strides_for(s: &Shape, out: &Shape) -> [usize; 4] {
    let full = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if s[i] == 1 && out[i] != 1 { 0 } else { full[i] };
    }
    st
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(a: &Shape, b: &Shape, out: &Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = strides_for(a, out);
    let sb = strides_for(b, out);
    let mut o = 0;
    for i0 in 0..out[0] {
        for i1 in 0..out[1] {
            for i2 in 0..out[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out[3] {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

pub fn binary_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out_shape: Shape, op: impl Fn(T, T) -> T) -> Tensor<T> {
    let mut out = Tensor::zeros(out_shape);
    if a.shape == b.shape {
        for ((o, &x), &y) in out.data.iter_mut().zip(&a.data).zip(&b.data) {
            *o = op(x, y);
        }
        return out;
    }
    for_each_broadcast(&a.shape, &b.shape, &out_shape, |o, i, j| {
        out.data[o] = op(a.data[i], b.data[j]);
    });
    out
}

/// Reduces `g` (output-shaped) onto operand `target` via `weight(o, a_idx, b_idx)`.
pub fn binary_adjoint<T: Scalar>(
    a: &Shape,
    b: &Shape,
    g: &Tensor<T>,
    target_is_a: bool,
    weight: impl Fn(usize, usize) -> T,
) -> Tensor<T> {
    let mut out = Tensor::zeros(if target_is_a { *a } else { *b });
    for_each_broadcast(a, b, &g.shape, |o, i, j| {
        let (t, other) = if target_is_a { (i, j) } else { (j, i) };
        out.data[t] = out.data[t] + g.data[o] * weight(other, t);
    });
    out
}

// ---- pooling and resampling ----

/// Like `max`, but a NaN operand wins so faults are not masked.
#[inline]
fn nan_max<T: Scalar>(a: T, b: T) -> T {
    if b > a || b.is_nan() {
        b
    } else {
        a
    }
}

pub fn max_pool2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    for p in 0..b * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                let m = nan_max(nan_max(nan_max(src[i], src[i + 1]), src[i + w]), src[i + w + 1]);
                dst[y * ow + xx] = m;
            }
        }
    }
    out
}

pub fn max_pool2_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = Tensor::zeros(x.shape);
    for p in 0..b * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let gs = &g.data[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx.data[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                // first maximum in scan order receives the gradient
                let mut best = i;
                for j in [i + 1, i + w, i + w + 1] {
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                dst[best] = dst[best] + gs[y * ow + xx];
            }
        }
    }
    gx
}

type Taps<T> = Vec<(usize, usize, T)>;

fn upsample_taps<T: Scalar>(n_in: usize, n_out: usize) -> Taps<T> {
    (0..n_out)
        .map(|i| {
            let (a, b, f) = lerp_taps(i, n_in, n_out);
            (a, b, T::of(f))
        })
        .collect()
}

pub fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape;
    let (oh, ow) = (2 * h, 2 * w);
    let tx = upsample_taps::<T>(w, ow);
    let ty = upsample_taps::<T>(h, oh);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    let mut rows = vec![T::zero(); h * ow];
    for p in 0..b * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, &(x0, x1, f)) in tx.iter().enumerate() {
                rows[y * ow + ox] = src[y * w + x0] * (T::one() - f) + src[y * w + x1] * f;
            }
        }
        let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, f)) in ty.iter().enumerate() {
            for ox in 0..ow {
                dst[oy * ow + ox] = rows[y0 * ow + ox] * (T::one() - f) + rows[y1 * ow + ox] * f;
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(in_shape: Shape, g: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = in_shape;
    let (oh, ow) = (2 * h, 2 * w);
    let tx = upsample_taps::<T>(w, ow);
    let ty = upsample_taps::<T>(h, oh);
    let mut gx = Tensor::zeros(in_shape);
    let mut rows = vec![T::zero(); h * ow];
    for p in 0..b * c {
        rows.fill(T::zero());
        let gs = &g.data[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, f)) in ty.iter().enumerate() {
            for ox in 0..ow {
                let v = gs[oy * ow + ox];
                rows[y0 * ow + ox] = rows[y0 * ow + ox] + v * (T::one() - f);
                rows[y1 * ow + ox] = rows[y1 * ow + ox] + v * f;
            }
        }
        let dst = &mut gx.data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, &(x0, x1, f)) in tx.iter().enumerate() {
                let v = rows[y * ow + ox];
                dst[y * w + x0] = dst[y * w + x0] + v * (T::one() - f);
                dst[y * w + x1] = dst[y * w + x1] + v * f;
            }
        }
    }
    gx
}

pub fn bin_mean_forward<T: Scalar>(x: &Tensor<T>, s: usize) -> Tensor<T> {
    let [b, c, h, w] = x.shape;
    let (oh, ow) = (h / s, w / s);
    let norm = T::one() / T::of((s * s) as f64);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    for p in 0..b * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                let o = (y / s) * ow + xx / s;
                dst[o] = dst[o] + src[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v = *v * norm);
    }
    out
}

pub fn bin_mean_backward<T: Scalar>(in_shape: Shape, g: &Tensor<T>, s: usize) -> Tensor<T> {
    let [b, c, h, w] = in_shape;
    let (oh, ow) = (h / s, w / s);
    let norm = T::one() / T::of((s * s) as f64);
    let mut gx = Tensor::zeros(in_shape);
    for p in 0..b * c {
        let gs = &g.data[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx.data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = gs[(y / s) * ow + xx / s] * norm;
            }
        }
    }
    gx
}

pub fn concat_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.shape;
    let cb = b.shape[1];
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for bi in 0..n {
        data.extend_from_slice(&a.data[bi * ca * hw..(bi + 1) * ca * hw]);
        data.extend_from_slice(&b.data[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    Tensor {
        shape: [n, ca + cb, h, w],
        data,
    }
}

/// Splits a concat gradient back into its two operand gradients.
pub fn concat_backward<T: Scalar>(ca: usize, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = g.shape;
    let cb = c - ca;
    let hw = h * w;
    let mut ga = Vec::with_capacity(n * ca * hw);
    let mut gb = Vec::with_capacity(n * cb * hw);
    for bi in 0..n {
        let base = bi * c * hw;
        ga.extend_from_slice(&g.data[base..base + ca * hw]);
        gb.extend_from_slice(&g.data[base + ca * hw..base + c * hw]);
    }
    (
        Tensor { shape: [n, ca, h, w], data: ga },
        Tensor { shape: [n, cb, h, w], data: gb },
    )
}

/// Circular convolution of every plane with a fixed transfer function;
/// `adjoint` uses the conjugate spectrum.
pub fn fft_conv<T: Scalar>(x: &Tensor<T>, fft: &Fft2d<T>, transfer: &[Complex<T>], adjoint: bool) -> Tensor<T> {
    let hw = x.plane();
    let mut out = Tensor::zeros(x.shape);
    for (src, dst) in x.data.chunks(hw).zip(out.data.chunks_mut(hw)) {
        let mut spec = fft.forward_real(src);
        for (s, t) in spec.iter_mut().zip(transfer) {
            *s = *s * if adjoint { t.conj() } else { *t };
        }
        dst.copy_from_slice(&fft.inverse_real(spec));
    }
    out
}

pub fn total_variation<T: Scalar>(x: &Tensor<T>) -> T {
    let [_, _, h, w] = x.shape;
    let mut acc = 0.0f64;
    for p in x.data.chunks(h * w) {
        for y in 0..h {
            for xx in 0..w {
                let v = p[y * w + xx].as_f64();
                if xx + 1 < w {
                    acc += (p[y * w + xx + 1].as_f64() - v).abs();
                }
                if y + 1 < h {
                    acc += (p[(y + 1) * w + xx].as_f64() - v).abs();
                }
            }
        }
    }
    T::of(acc / x.len() as f64)
}

pub fn total_variation_backward<T: Scalar>(x: &Tensor<T>, g: T) -> Tensor<T> {
    let [_, _, h, w] = x.shape;
    let scale = g / T::of(x.len() as f64);
    let mut gx = Tensor::zeros(x.shape);
    let sign = |d: T| {
        if d > T::zero() {
            T::one()
        } else if d < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    };
    for (p, gp) in x.data.chunks(h * w).zip(gx.data.chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                if xx + 1 < w {
                    let s = sign(p[i + 1] - p[i]) * scale;
                    gp[i + 1] = gp[i + 1] + s;
                    gp[i] = gp[i] - s;
                }
                if y + 1 < h {
                    let s = sign(p[i + w] - p[i]) * scale;
                    gp[i + w] = gp[i + w] + s;
                    gp[i] = gp[i] - s;
                }
            }
        }
    }
    gx
}
