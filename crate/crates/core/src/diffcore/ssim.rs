//! Gaussian-windowed SSIM and its gradient, evaluated in double precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Window and stabilising constants of the structural similarity index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    /// Side of the square Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::invalid(format!(
                "ssim window must be odd and positive, got {}",
                self.window
            )));
        }
        if !(self.sigma > 0.0 && self.data_range > 0.0 && self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::invalid("ssim sigma, k1, k2 and data_range must be positive"));
        }
        Ok(())
    }

    /// Normalised 1-D taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let t: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = t.iter().sum();
        t.into_iter().map(|v| v / s).collect()
    }

    pub fn check_size(&self, w: usize, h: usize) -> Result<()> {
        if w < self.window || h < self.window {
            return Err(Error::shape(format!(
                "image {w}x{h} is smaller than the {0}x{0} ssim window",
                self.window
            )));
        }
        Ok(())
    }
}

/// Valid-mode separable filtering of a `w × h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().zip(&row[x..x + n]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let r = &tmp[(y + k) * ow..(y + k + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(r) {
                *o += t * v;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let r = &mut tmp[(y + k) * ow..(y + k + 1) * ow];
            for (o, v) in r.iter_mut().zip(&g[y * ow..(y + 1) * ow]) {
                *o += t * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (k, t) in taps.iter().enumerate() {
                out[y * w + x + k] += t * v;
            }
        }
    }
    out
}

struct Moments {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn moments(x: &[f64], y: &[f64], w: usize, h: usize, taps: &[f64]) -> Moments {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    Moments {
        mx: filter_valid(x, w, h, taps),
        my: filter_valid(y, w, h, taps),
        exx: filter_valid(&sq(x, x), w, h, taps),
        eyy: filter_valid(&sq(y, y), w, h, taps),
        exy: filter_valid(&sq(x, y), w, h, taps),
    }
}

/// Mean SSIM over all valid window positions of one plane.
pub fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, p: &SsimParams) -> f64 {
    let m = moments(x, y, w, h, &p.taps());
    let (c1, c2) = (p.c1(), p.c2());
    let n = m.mx.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (mx, my) = (m.mx[i], m.my[i]);
        let sxx = m.exx[i] - mx * mx;
        let syy = m.eyy[i] - my * my;
        let sxy = m.exy[i] - mx * my;
        acc += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    }
    acc / n as f64
}

/// Value and gradients of [`ssim_plane`] with respect to both planes.
pub fn ssim_plane_grad(
    x: &[f64],
    y: &[f64],
    w: usize,
    h: usize,
    p: &SsimParams,
) -> (f64, Vec<f64>, Vec<f64>) {
    let taps = p.taps();
    let m = moments(x, y, w, h, &taps);
    let (c1, c2) = (p.c1(), p.c2());
    let n = m.mx.len();
    let inv_n = 1.0 / n as f64;
    let (mut ax, mut ay, mut b, mut c) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut acc = 0.0;
    for i in 0..n {
        let (mx, my) = (m.mx[i], m.my[i]);
        let sxx = m.exx[i] - mx * mx;
        let syy = m.eyy[i] - my * my;
        let sxy = m.exy[i] - mx * my;
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * sxy + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = sxx + syy + c2;
        let s = a1 * a2 / (b1 * b2);
        acc += s;
        // derivatives with respect to the raw moments μ, E[x²], E[xy]
        let d_var = -s / b2;
        let d_cov = 2.0 * a1 / (b1 * b2);
        let d_mx = 2.0 * my * a2 / (b1 * b2) - 2.0 * mx * s / b1;
        let d_my = 2.0 * mx * a2 / (b1 * b2) - 2.0 * my * s / b1;
        ax[i] = (d_mx - 2.0 * mx * d_var - my * d_cov) * inv_n;
        ay[i] = (d_my - 2.0 * my * d_var - mx * d_cov) * inv_n;
        b[i] = d_var * inv_n;
        c[i] = d_cov * inv_n;
    }
    let ga_x = filter_valid_adjoint(&ax, w, h, &taps);
    let ga_y = filter_valid_adjoint(&ay, w, h, &taps);
    let gb = filter_valid_adjoint(&b, w, h, &taps);
    let gc = filter_valid_adjoint(&c, w, h, &taps);
    let gx = (0..w * h).map(|i| ga_x[i] + 2.0 * x[i] * gb[i] + y[i] * gc[i]).collect();
    let gy = (0..w * h).map(|i| ga_y[i] + 2.0 * y[i] * gb[i] + x[i] * gc[i]).collect();
    (acc * inv_n, gx, gy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_sum_to_one() {
        let t = SsimParams::default().taps();
        assert_eq!(t.len(), 11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((t[0] - t[10]).abs() < 1e-18);
    }

    #[test]
    fn adjoint_identity() {
        // <F a, b> == <a, Fᵀ b>
        let (w, h) = (17, 14);
        let taps = SsimParams::default().taps();
        let a: Vec<f64> = (0..w * h).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        let b: Vec<f64> = (0..(w - 10) * (h - 10)).map(|i| ((i * 13 % 7) as f64).cos()).collect();
        let fa = filter_valid(&a, w, h, &taps);
        let ftb = filter_valid_adjoint(&b, w, h, &taps);
        let l: f64 = fa.iter().zip(&b).map(|(p, q)| p * q).sum();
        let r: f64 = a.iter().zip(&ftb).map(|(p, q)| p * q).sum();
        assert!((l - r).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let (w, h) = (13, 12);
        let p = SsimParams::default();
        let x: Vec<f64> = (0..w * h).map(|i| 0.5 + 0.4 * ((i * 7) as f64).sin()).collect();
        let y: Vec<f64> = (0..w * h).map(|i| 0.5 + 0.3 * ((i * 3) as f64).cos()).collect();
        let (_, gx, gy) = ssim_plane_grad(&x, &y, w, h, &p);
        let eps = 1e-6;
        for i in [0, 20, 77, w * h - 1] {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let num = (ssim_plane(&xp, &y, w, h, &p) - ssim_plane(&xm, &y, w, h, &p)) / (2.0 * eps);
            assert!((num - gx[i]).abs() < 1e-7, "{num} vs {}", gx[i]);
            let mut yp = y.clone();
            yp[i] += eps;
            let mut ym = y.clone();
            ym[i] -= eps;
            let num = (ssim_plane(&x, &yp, w, h, &p) - ssim_plane(&x, &ym, w, h, &p)) / (2.0 * eps);
            assert!((num - gy[i]).abs() < 1e-7);
        }
    }
}
