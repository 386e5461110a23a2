//! Diffraction-limited imaging: Airy PSF, OTF, FFT convolution, camera
//! binning, additive noise and the additive resolution model.

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{signed_index, Fft2d};
use crate::imgcore::{GridSpec, ImageStack, Raster, Seed};

/// First zero of J1.
const J1_FIRST_ZERO: f64 = 3.831_705_970_207_512;

/// Objective NA, emission wavelength and the high-resolution sampling grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalModel {
    pub na: f64,
    pub wavelength_nm: f64,
    pub grid: GridSpec,
}

impl OpticalModel {
    pub fn new(na: f64, wavelength_nm: f64, grid: GridSpec) -> Result<Self> {
        let model = Self {
            na,
            wavelength_nm,
            grid,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.na > 0.0 && self.na < 2.0) {
            return Err(Error::invalid(format!("na must be in (0, 2), got {}", self.na)));
        }
        if !(self.wavelength_nm.is_finite() && self.wavelength_nm > 0.0) {
            return Err(Error::invalid(format!(
                "wavelength_nm must be > 0, got {}",
                self.wavelength_nm
            )));
        }
        if self.grid.nyquist() < self.f_det() {
            return Err(Error::invalid(format!(
                "grid pitch {} nm is too coarse: Nyquist {:.3e} cyc/nm < OTF cutoff {:.3e} cyc/nm",
                self.grid.pitch_nm,
                self.grid.nyquist(),
                self.f_det()
            )));
        }
        Ok(())
    }

    /// Incoherent OTF cutoff 2·NA/λ in cycles/nm.
    pub fn f_det(&self) -> f64 {
        2.0 * self.na / self.wavelength_nm
    }

    /// Abbe distance λ/(2·NA); "the diffraction limit" throughout the crate.
    pub fn d_abbe(&self) -> f64 {
        self.wavelength_nm / (2.0 * self.na)
    }

    /// Rayleigh radius 0.61·λ/NA (first dark Airy ring, rounded coefficient).
    pub fn rayleigh(&self) -> f64 {
        0.61 * self.wavelength_nm / self.na
    }

    /// Exact radius of the first Airy zero (J1 root 3.8317).
    pub fn first_airy_zero(&self) -> f64 {
        J1_FIRST_ZERO / (2.0 * std::f64::consts::PI) * self.wavelength_nm / self.na
    }

    /// Same optics on a different sampling grid.
    pub fn with_grid(&self, grid: GridSpec) -> Result<Self> {
        Self::new(self.na, self.wavelength_nm, grid)
    }

    /// Analytic incoherent OTF (the "chinese hat") at radial frequency `f`.
    pub fn analytic_otf(&self, f: f64) -> f64 {
        let rho = f.abs() / self.f_det();
        if rho >= 1.0 {
            0.0
        } else {
            2.0 / std::f64::consts::PI * (rho.acos() - rho * (1.0 - rho * rho).sqrt())
        }
    }
}

/// Centred, unit-sum PSF sampled on the grid pitch. The centre sample sits at
/// `(width / 2, height / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel {
    pub width: usize,
    pub height: usize,
    pub pitch_nm: f64,
    pub data: Vec<f64>,
}

impl PsfKernel {
    pub fn center(&self) -> (usize, usize) {
        (self.width / 2, self.height / 2)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Unit impulse kernel (no blur).
    pub fn delta(pitch_nm: f64) -> Self {
        Self {
            width: 1,
            height: 1,
            pitch_nm,
            data: vec![1.0],
        }
    }

    pub fn to_raster(&self) -> Result<Raster> {
        let grid = GridSpec::new(self.width, self.height, self.pitch_nm)?;
        Raster::new(grid, self.data.iter().map(|&v| v as f32).collect())
    }

    /// Kernel wrapped onto `grid` with its centre at index 0.
    fn wrapped(&self, grid: &GridSpec) -> Result<Vec<f64>> {
        if self.width > grid.width || self.height > grid.height {
            return Err(Error::shape(format!(
                "{}x{} kernel does not fit in {}x{} grid",
                self.width, self.height, grid.width, grid.height
            )));
        }
        check_pitch(self.pitch_nm, grid.pitch_nm)?;
        let (cx, cy) = self.center();
        let mut out = vec![0.0; grid.len()];
        for y in 0..self.height {
            let ty = (y + grid.height - cy) % grid.height;
            for x in 0..self.width {
                let tx = (x + grid.width - cx) % grid.width;
                out[ty * grid.width + tx] += self.get(x, y);
            }
        }
        Ok(out)
    }

    /// DFT of the kernel wrapped onto `grid`; multiplying by this performs
    /// circular convolution.
    pub fn transfer(&self, grid: &GridSpec) -> Result<Vec<Complex64>> {
        let wrapped = self.wrapped(grid)?;
        Ok(Fft2d::<f64>::new(grid.width, grid.height).forward_real(&wrapped))
    }
}

fn check_pitch(a: f64, b: f64) -> Result<()> {
    if ((a - b) / b).abs() > 1e-9 {
        return Err(Error::shape(format!("pitch mismatch: {a} nm vs {b} nm")));
    }
    Ok(())
}

/// [2·J1(v)/v]², with the v → 0 limit of 1.
pub fn airy_intensity(v: f64) -> f64 {
    if v.abs() < 1e-8 {
        1.0
    } else {
        let a = 2.0 * libm::j1(v) / v;
        a * a
    }
}

/// Point-sampled Airy PSF truncated at `support_radius` Rayleigh radii
/// (side `2·ceil(support·rayleigh/pitch) + 1`), normalised to unit sum.
pub fn airy_psf(model: &OpticalModel, support_radius: f64) -> Result<PsfKernel> {
    model.validate()?;
    if !(support_radius > 0.0) {
        return Err(Error::invalid("support_radius must be > 0"));
    }
    let pitch = model.grid.pitch_nm;
    let half = (support_radius * model.rayleigh() / pitch).ceil() as usize;
    let side = 2 * half + 1;
    let k = 2.0 * std::f64::consts::PI * model.na / model.wavelength_nm;
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - half as f64;
            let dy = y as f64 - half as f64;
            let r = pitch * (dx * dx + dy * dy).sqrt();
            data.push(airy_intensity(k * r));
        }
    }
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Ok(PsfKernel {
        width: side,
        height: side,
        pitch_nm: pitch,
        data,
    })
}

/// Airy PSF covering the whole grid, built as the inverse DFT of the analytic
/// OTF. Its transfer function on that grid is exactly zero beyond 2·NA/λ,
/// which a truncated spatial kernel cannot achieve.
pub fn bandlimited_psf(model: &OpticalModel) -> Result<PsfKernel> {
    model.validate()?;
    let g = model.grid;
    let (w, h) = (g.width, g.height);
    let dfx = 1.0 / (w as f64 * g.pitch_nm);
    let dfy = 1.0 / (h as f64 * g.pitch_nm);
    let mut otf = Vec::with_capacity(g.len());
    for ky in 0..h {
        let fy = signed_index(ky, h) * dfy;
        for kx in 0..w {
            let fx = signed_index(kx, w) * dfx;
            otf.push(Complex64::new(model.analytic_otf(fx.hypot(fy)), 0.0));
        }
    }
    let origin = Fft2d::<f64>::new(w, h).inverse_real(otf);
    let (cx, cy) = (w / 2, h / 2);
    let mut data = vec![0.0; g.len()];
    for y in 0..h {
        for x in 0..w {
            data[((y + cy) % h) * w + (x + cx) % w] = origin[y * w + x];
        }
    }
    Ok(PsfKernel {
        width: w,
        height: h,
        pitch_nm: g.pitch_nm,
        data,
    })
}

/// Radial frequency (cycles/nm) of DFT bin `(kx, ky)` on `grid`.
pub fn bin_frequency(grid: &GridSpec, kx: usize, ky: usize) -> f64 {
    let fx = signed_index(kx, grid.width) / (grid.width as f64 * grid.pitch_nm);
    let fy = signed_index(ky, grid.height) / (grid.height as f64 * grid.pitch_nm);
    fx.hypot(fy)
}

/// |DFT| of the PSF zero-padded onto `grid`, DC-normalised. Standard FFT
/// ordering (DC at index 0).
pub fn otf_magnitude(psf: &PsfKernel, grid: &GridSpec) -> Result<Raster> {
    let t = psf.transfer(grid)?;
    let dc = t[0].norm();
    if !(dc > 0.0) {
        return Err(Error::Degenerate("PSF has zero sum".into()));
    }
    Raster::new(*grid, t.iter().map(|c| (c.norm() / dc) as f32).collect())
}

/// Precomputed circular convolution with a fixed PSF on one grid.
#[derive(Debug, Clone)]
pub struct Convolver {
    grid: GridSpec,
    fft: Fft2d<f64>,
    transfer: Vec<Complex64>,
}

impl Convolver {
    pub fn new(psf: &PsfKernel, grid: GridSpec) -> Result<Self> {
        Ok(Self {
            transfer: psf.transfer(&grid)?,
            fft: Fft2d::new(grid.width, grid.height),
            grid,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn transfer(&self) -> &[Complex64] {
        &self.transfer
    }

    pub fn apply(&self, data: &[f64]) -> Vec<f64> {
        let mut spec = self.fft.forward_real(data);
        for (s, t) in spec.iter_mut().zip(&self.transfer) {
            *s *= t;
        }
        self.fft.inverse_real(spec)
    }
}

/// Circular convolution of `image` with `psf`, computed in the frequency domain.
pub fn convolve_fft(image: &Raster, psf: &PsfKernel) -> Result<Raster> {
    let conv = Convolver::new(psf, image.grid)?;
    let data: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
    Raster::new(
        image.grid,
        conv.apply(&data).into_iter().map(|v| v as f32).collect(),
    )
}

/// Block-mean camera binning. Output pitch is `factor` times the input pitch.
pub fn bin_down(image: &Raster, factor: usize) -> Result<Raster> {
    if ![1, 2, 4].contains(&factor) {
        return Err(Error::invalid(format!(
            "binning factor must be 1, 2 or 4, got {factor}"
        )));
    }
    let grid = image.grid.coarsened(factor)?;
    if factor == 1 {
        return Ok(image.clone());
    }
    Raster::new(grid, bin_mean_f64(&image.data, image.width(), image.height(), factor)
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

pub(crate) fn bin_mean_f64<T: Copy + Into<f64>>(
    data: &[T],
    w: usize,
    h: usize,
    factor: usize,
) -> Vec<f64> {
    let (ow, oh) = (w / factor, h / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; ow * oh];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        let orow = &mut out[(y / factor) * ow..(y / factor + 1) * ow];
        for (x, &v) in row.iter().enumerate() {
            orow[x / factor] += v.into();
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    out
}

/// Zero-mean Gaussian field of `len` samples with standard deviation `sigma`,
/// keyed by `(seed, frame_index)`.
pub fn gaussian_noise(len: usize, sigma: f64, seed: Seed, frame_index: u64) -> Vec<f64> {
    let mut rng = seed.rng("noise", frame_index);
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect()
}

/// Adds noise of standard deviation `sigma` to one frame and clamps at zero.
pub fn add_noise_to_frame(frame: &mut [f32], sigma: f64, seed: Seed, frame_index: u64) {
    if sigma == 0.0 {
        return;
    }
    let noise = gaussian_noise(frame.len(), sigma, seed, frame_index);
    for (v, n) in frame.iter_mut().zip(noise) {
        *v = ((*v as f64 + n).max(0.0)) as f32;
    }
}

/// Peak-referenced noise level: σ = max(stack) / snr. `None` disables noise.
pub fn noise_sigma(peak: f64, snr: Option<f64>) -> Result<f64> {
    match snr {
        None => Ok(0.0),
        Some(s) if s.is_infinite() && s > 0.0 => Ok(0.0),
        Some(s) if s > 0.0 => Ok(peak / s),
        Some(s) => Err(Error::invalid(format!("snr must be > 0, got {s}"))),
    }
}

/// Adds i.i.d. Gaussian noise with σ = max(stack)/snr to every frame, then
/// clamps at zero. Frame `i` uses noise stream `i`.
pub fn add_gaussian_noise(stack: &ImageStack, snr: Option<f64>, seed: Seed) -> Result<ImageStack> {
    let peak = stack.max() as f64;
    let sigma = noise_sigma(peak, snr)?;
    if sigma > 0.0 && !(peak > 0.0) {
        return Err(Error::Degenerate("noise needs a stack with positive max".into()));
    }
    let mut out = stack.clone();
    for (i, f) in out.frames.iter_mut().enumerate() {
        add_noise_to_frame(f, sigma, seed, i as u64);
    }
    Ok(out)
}

/// Highest recoverable frequency f_sim = f_det + f_ill and its ratio to f_det.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolutionPrediction {
    pub f_det: f64,
    pub f_ill: f64,
    pub f_sim: f64,
}

impl ResolutionPrediction {
    /// f_sim / f_det; `None` when f_det is zero.
    pub fn improvement(&self) -> Option<f64> {
        (self.f_det > 0.0).then(|| self.f_sim / self.f_det)
    }
}

pub fn predicted_resolution(f_det: f64, f_ill: f64) -> Result<ResolutionPrediction> {
    if !(f_det >= 0.0) || !(f_ill >= 0.0) {
        return Err(Error::invalid(format!(
            "frequencies must be >= 0, got f_det={f_det}, f_ill={f_ill}"
        )));
    }
    Ok(ResolutionPrediction {
        f_det,
        f_ill,
        f_sim: f_det + f_ill,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn model(side: usize, pitch: f64) -> OpticalModel {
        OpticalModel::new(1.4, 525.0, GridSpec::square(side, pitch).unwrap()).unwrap()
    }

    #[test]
    fn derived_quantities() {
        let m = model(64, 15.0);
        assert!((m.f_det() - 2.8 / 525.0).abs() < 1e-15);
        assert!((m.d_abbe() - 187.5).abs() < 1e-12);
        assert!((m.rayleigh() - 0.61 * 525.0 / 1.4).abs() < 1e-12);
        assert!((m.first_airy_zero() - m.rayleigh()).abs() < 0.1);
    }

    #[test]
    fn coarse_grid_rejected() {
        let g = GridSpec::square(32, 100.0).unwrap();
        assert!(OpticalModel::new(1.4, 525.0, g).is_err());
        assert!(OpticalModel::new(2.5, 525.0, GridSpec::square(8, 10.0).unwrap()).is_err());
    }

    #[test]
    fn airy_peak_sum_and_symmetry() {
        let m = model(256, 15.0);
        let psf = airy_psf(&m, 4.0).unwrap();
        assert_eq!(psf.width % 2, 1);
        let half = (4.0 * m.rayleigh() / 15.0).ceil() as usize;
        assert_eq!(psf.width, 2 * half + 1);
        assert!((psf.sum() - 1.0).abs() < 1e-6);
        let (cx, cy) = psf.center();
        let peak = psf.get(cx, cy);
        assert!(psf.data.iter().all(|&v| v <= peak));
        // 8-fold symmetry of a point-sampled radial function
        let max_asym = (0..psf.height)
            .flat_map(|y| (0..psf.width).map(move |x| (x, y)))
            .map(|(x, y)| {
                let a = psf.get(x, y);
                let b = psf.get(y, x);
                let c = psf.get(psf.width - 1 - x, y);
                (a - b).abs().max((a - c).abs()) / peak
            })
            .fold(0.0, f64::max);
        assert!(max_asym < 1e-6);
    }

    #[test]
    fn airy_first_zero_at_rayleigh_radius() {
        let m = model(256, 15.0);
        let psf = airy_psf(&m, 4.0).unwrap();
        let (cx, cy) = psf.center();
        let row: Vec<f64> = (cx..psf.width).map(|x| psf.get(x, cy)).collect();
        // first local minimum along the axis
        let first_min = (1..row.len() - 1)
            .find(|&i| row[i] <= row[i - 1] && row[i] <= row[i + 1])
            .unwrap();
        let r_nm = first_min as f64 * 15.0;
        assert!((r_nm - 0.61 * 525.0 / 1.4).abs() <= 7.5 + 0.2, "zero at {r_nm}");
    }

    #[test]
    fn otf_dc_and_cutoff() {
        let m = model(128, 20.0);
        let psf = bandlimited_psf(&m).unwrap();
        assert!((psf.sum() - 1.0).abs() < 1e-9);
        let otf = otf_magnitude(&psf, &m.grid).unwrap();
        assert_eq!(otf.data[0], 1.0);
        for ky in 0..128 {
            for kx in 0..128 {
                if bin_frequency(&m.grid, kx, ky) > m.f_det() {
                    assert!(otf.get(kx, ky) < 1e-6, "bin ({kx},{ky}) = {}", otf.get(kx, ky));
                }
            }
        }
    }

    #[test]
    fn otf_of_delta_is_flat() {
        let g = GridSpec::square(16, 20.0).unwrap();
        let otf = otf_magnitude(&PsfKernel::delta(20.0), &g).unwrap();
        assert!(otf.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn otf_monotone_along_radius() {
        let m = model(128, 20.0);
        let psf = bandlimited_psf(&m).unwrap();
        let otf = otf_magnitude(&psf, &m.grid).unwrap();
        let axis: Vec<f32> = (0..64).map(|k| otf.get(k, 0)).collect();
        for w in axis.windows(2) {
            assert!(w[1] <= w[0] + 1e-3);
        }
        // point-sampled kernel too, inside the passband
        let trunc = airy_psf(&m, 4.0).unwrap();
        let otf_t = otf_magnitude(&trunc, &m.grid).unwrap();
        let n_pass = (m.f_det() * 128.0 * 20.0) as usize;
        for k in 1..n_pass {
            assert!(otf_t.get(k, 0) <= otf_t.get(k - 1, 0) + 1e-3);
        }
    }

    #[test]
    fn otf_matches_analytic_hat() {
        let m = model(128, 20.0);
        let otf = otf_magnitude(&bandlimited_psf(&m).unwrap(), &m.grid).unwrap();
        for k in 0..64 {
            let f = bin_frequency(&m.grid, k, 0);
            assert!((otf.get(k, 0) as f64 - m.analytic_otf(f)).abs() < 1e-6);
        }
    }

    #[test]
    fn convolve_delta_gives_psf() {
        let m = model(64, 20.0);
        let psf = airy_psf(&m, 2.0).unwrap();
        let mut img = Raster::zeros(m.grid);
        img.set(32, 32, 1.0);
        let out = convolve_fft(&img, &psf).unwrap();
        let (cx, cy) = psf.center();
        for y in 0..psf.height {
            for x in 0..psf.width {
                let ox = 32 + x - cx;
                let oy = 32 + y - cy;
                assert!((out.get(ox, oy) as f64 - psf.get(x, y)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn convolve_constant_preserved() {
        let m = model(32, 40.0);
        let psf = airy_psf(&m, 2.0).unwrap();
        let out = convolve_fft(&Raster::filled(m.grid, 0.3), &psf).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    /// Direct circular double loop.
    fn spatial_convolve(img: &Raster, psf: &PsfKernel) -> Vec<f64> {
        let (w, h) = (img.width(), img.height());
        let (cx, cy) = psf.center();
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..psf.height {
                    for kx in 0..psf.width {
                        let sx = (x + w + cx - kx) % w;
                        let sy = (y + h + cy - ky) % h;
                        acc += psf.get(kx, ky) * img.get(sx, sy) as f64;
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    #[test]
    fn convolve_matches_spatial_oracle() {
        let m = model(32, 40.0);
        let psf = airy_psf(&m, 1.5).unwrap();
        let mut rng = Seed(7).rng("test", 0);
        let img = Raster::from_fn(m.grid, |_, _| rng.random::<f32>());
        let fast = convolve_fft(&img, &psf).unwrap();
        let slow = spatial_convolve(&img, &psf);
        let err = fast
            .data
            .iter()
            .zip(&slow)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "max abs diff {err}");
    }

    #[test]
    fn convolve_pitch_mismatch() {
        let m = model(32, 20.0);
        let psf = airy_psf(&m, 1.0).unwrap();
        let img = Raster::zeros(GridSpec::square(32, 10.0).unwrap());
        assert!(matches!(convolve_fft(&img, &psf), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn bin_down_cases() {
        let g = GridSpec::square(2, 10.0).unwrap();
        let r = Raster::new(g, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(bin_down(&r, 1).unwrap(), r);
        let b = bin_down(&r, 2).unwrap();
        assert_eq!(b.data, vec![4.0]);
        assert_eq!(b.grid.pitch_nm, 20.0);
        let c = bin_down(&Raster::filled(GridSpec::square(8, 5.0).unwrap(), 2.5), 4).unwrap();
        assert!(c.data.iter().all(|&v| v == 2.5));
        assert!(bin_down(&Raster::zeros(GridSpec::new(6, 4, 1.0).unwrap()), 4).is_err());
        assert!(bin_down(&r, 3).is_err());
    }

    #[test]
    fn noise_disabled_is_identity() {
        let s = Raster::filled(GridSpec::square(8, 10.0).unwrap(), 1.0).into_stack();
        assert_eq!(add_gaussian_noise(&s, None, Seed(1)).unwrap(), s);
        assert_eq!(add_gaussian_noise(&s, Some(f64::INFINITY), Seed(1)).unwrap(), s);
        assert!(add_gaussian_noise(&s, Some(0.0), Seed(1)).is_err());
        assert!(add_gaussian_noise(&s, Some(-3.0), Seed(1)).is_err());
    }

    #[test]
    fn noise_sigma_matches_snr() {
        // Estimate sigma from the field itself and from an unclamped output.
        let g = GridSpec::square(256, 10.0).unwrap();
        let noise = gaussian_noise(g.len(), 0.1, Seed(3), 0);
        let mean = noise.iter().sum::<f64>() / noise.len() as f64;
        let var = noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (noise.len() - 1) as f64;
        assert!((var.sqrt() / 0.1 - 1.0).abs() < 0.02);

        let s = Raster::filled(g, 1.0).into_stack();
        let n = add_gaussian_noise(&s, Some(10.0), Seed(3)).unwrap();
        let diffs: Vec<f64> = n.frames[0].iter().map(|&v| v as f64 - 1.0).collect();
        let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
        assert!((sd / 0.1 - 1.0).abs() < 0.02, "sd {sd}");
    }

    #[test]
    fn noise_is_deterministic_and_clamped() {
        let g = GridSpec::square(32, 10.0).unwrap();
        let mut r = Raster::zeros(g);
        r.set(3, 3, 1.0);
        let s = r.into_stack();
        let a = add_gaussian_noise(&s, Some(2.0), Seed(9)).unwrap();
        let b = add_gaussian_noise(&s, Some(2.0), Seed(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.min() >= 0.0);
        assert_ne!(a, add_gaussian_noise(&s, Some(2.0), Seed(10)).unwrap());
    }

    #[test]
    fn resolution_model() {
        let f = 0.005;
        assert_eq!(predicted_resolution(f, f).unwrap().improvement(), Some(2.0));
        assert_eq!(predicted_resolution(f, 2.0 * f).unwrap().improvement(), Some(3.0));
        assert_eq!(predicted_resolution(f, 0.0).unwrap().improvement(), Some(1.0));
        assert!(predicted_resolution(-1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn resolution_symmetric(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let ab = predicted_resolution(a, b).unwrap().f_sim;
            let ba = predicted_resolution(b, a).unwrap().f_sim;
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(ab, a + b);
        }

        #[test]
        fn bin_conserves_mean(vals in proptest::collection::vec(0.0f32..10.0, 64)) {
            let r = Raster::new(GridSpec::square(8, 10.0).unwrap(), vals).unwrap();
            for f in [2usize, 4] {
                let b = bin_down(&r, f).unwrap();
                prop_assert!((b.mean() - r.mean()).abs() < 1e-5);
            }
        }

        #[test]
        fn convolution_linear_and_energy_preserving(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let m = model(32, 40.0);
            let psf = airy_psf(&m, 1.5).unwrap();
            let mut rng = Seed(seed).rng("t", 0);
            let x = Raster::from_fn(m.grid, |_, _| rng.random::<f32>());
            let y = Raster::from_fn(m.grid, |_, _| rng.random::<f32>());
            let comb = Raster::from_fn(m.grid, |i, j| a * x.get(i, j) + b * y.get(i, j));
            let lhs = convolve_fft(&comb, &psf).unwrap();
            let cx = convolve_fft(&x, &psf).unwrap();
            let cy = convolve_fft(&y, &psf).unwrap();
            let scale = lhs.data.iter().fold(1e-3f32, |m, v| m.max(v.abs()));
            for k in 0..lhs.data.len() {
                let rhs = a * cx.data[k] + b * cy.data[k];
                prop_assert!((lhs.data[k] - rhs).abs() / scale < 1e-5);
            }
            let sx: f64 = x.data.iter().map(|&v| v as f64).sum();
            let scx: f64 = cx.data.iter().map(|&v| v as f64).sum();
            prop_assert!((sx - scx).abs() / sx < 1e-4);
        }
    }
}
