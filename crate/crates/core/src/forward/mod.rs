//! The SIM acquisition operator `H(ρ) = bin(I·ρ ∗ PSF) + N` and the simulated
//! data pipeline built on it.

mod phantom;

pub use phantom::{
    gen_dot_phantom, gen_filament_phantom, gen_siemens_star, gen_two_line_phantom,
    prepare_ground_truth, Orientation, Phantom, TwoLineGeometry,
};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imgcore::{GridSpec, ImageStack, Raster, Seed};
use crate::optics::{
    self, add_noise_to_frame, bandlimited_psf, noise_sigma, Convolver, OpticalModel, PsfKernel,
};
use crate::patterns::PatternSet;

/// Noise stream index used for the widefield reference frame.
pub const WIDEFIELD_STREAM: u64 = u64::MAX;

/// Everything needed to simulate one acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionSpec {
    pub optics: OpticalModel,
    pub patterns: PatternSet,
    pub downsample: usize,
    /// Peak signal over noise σ; `None` disables noise.
    pub snr: Option<f64>,
    pub seed: Seed,
}

impl AcquisitionSpec {
    pub fn new(
        optics: OpticalModel,
        patterns: PatternSet,
        downsample: usize,
        snr: Option<f64>,
        seed: Seed,
    ) -> Result<Self> {
        let spec = Self {
            optics,
            patterns,
            downsample,
            snr,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.optics.validate()?;
        if self.patterns.grid() != self.optics.grid {
            return Err(Error::shape(format!(
                "pattern grid {:?} differs from optics grid {:?}",
                self.patterns.grid(),
                self.optics.grid
            )));
        }
        if ![1, 2, 4].contains(&self.downsample) {
            return Err(Error::invalid(format!(
                "downsample must be 1, 2 or 4, got {}",
                self.downsample
            )));
        }
        self.optics.grid.coarsened(self.downsample)?;
        noise_sigma(1.0, self.snr)?;
        Ok(())
    }

    /// Camera grid of the sub-frames.
    pub fn subframe_grid(&self) -> GridSpec {
        self.optics
            .grid
            .coarsened(self.downsample)
            .expect("validated at construction")
    }

    pub fn frames(&self) -> usize {
        self.patterns.len()
    }
}

/// An [`AcquisitionSpec`] with its PSF transfer function precomputed.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    spec: AcquisitionSpec,
    psf: PsfKernel,
    convolver: Convolver,
}

impl ForwardModel {
    /// Uses the band-limited Airy PSF on the object grid.
    pub fn new(spec: AcquisitionSpec) -> Result<Self> {
        let psf = bandlimited_psf(&spec.optics)?;
        Self::with_psf(spec, psf)
    }

    pub fn with_psf(spec: AcquisitionSpec, psf: PsfKernel) -> Result<Self> {
        spec.validate()?;
        let convolver = Convolver::new(&psf, spec.optics.grid)?;
        Ok(Self {
            spec,
            psf,
            convolver,
        })
    }

    pub fn spec(&self) -> &AcquisitionSpec {
        &self.spec
    }

    pub fn psf(&self) -> &PsfKernel {
        &self.psf
    }

    pub fn convolver(&self) -> &Convolver {
        &self.convolver
    }

    fn check_grid(&self, r: &Raster, what: &str) -> Result<()> {
        if r.grid != self.spec.optics.grid {
            return Err(Error::shape(format!(
                "{what} grid {}x{} @ {} nm does not match acquisition grid {}x{} @ {} nm",
                r.width(),
                r.height(),
                r.grid.pitch_nm,
                self.spec.optics.grid.width,
                self.spec.optics.grid.height,
                self.spec.optics.grid.pitch_nm
            )));
        }
        Ok(())
    }

    /// `bin(conv(object ⊙ pattern, psf))` without noise.
    pub fn noiseless_subframe(&self, object: &Raster, pattern: &Raster) -> Result<Raster> {
        self.check_grid(object, "object")?;
        self.check_grid(pattern, "pattern")?;
        let product: Vec<f64> = object
            .data
            .iter()
            .zip(&pattern.data)
            .map(|(&o, &p)| o as f64 * p as f64)
            .collect();
        let blurred = self.convolver.apply(&product);
        let g = self.spec.optics.grid;
        let binned = optics::bin_mean_f64(&blurred, g.width, g.height, self.spec.downsample);
        Raster::new(
            self.spec.subframe_grid(),
            binned.into_iter().map(|v| v as f32).collect(),
        )
    }

    /// One sub-frame. Noise (when enabled) is referenced to this frame's own
    /// noiseless peak and drawn from stream `frame_index`.
    pub fn forward_subframe(
        &self,
        object: &Raster,
        pattern: &Raster,
        frame_index: u64,
    ) -> Result<Raster> {
        let mut frame = self.noiseless_subframe(object, pattern)?;
        let sigma = noise_sigma(frame.max() as f64, self.spec.snr)?;
        add_noise_to_frame(&mut frame.data, sigma, self.spec.seed, frame_index);
        Ok(frame)
    }

    pub fn noiseless_stack(&self, object: &Raster) -> Result<ImageStack> {
        let frames = self
            .spec
            .patterns
            .stack
            .rasters()
            .map(|p| self.noiseless_subframe(object, &p).map(|r| r.data))
            .collect::<Result<Vec<_>>>()?;
        ImageStack::new(self.spec.subframe_grid(), frames)
    }

    /// All sub-frames in pattern order. Noise σ = max(noiseless stack)/snr,
    /// frame `i` drawing from stream `i`.
    pub fn forward_stack(&self, object: &Raster) -> Result<ImageStack> {
        let clean = self.noiseless_stack(object)?;
        let (stack, _) = self.add_stack_noise(clean)?;
        Ok(stack)
    }

    fn add_stack_noise(&self, mut stack: ImageStack) -> Result<(ImageStack, f64)> {
        let sigma = noise_sigma(stack.max() as f64, self.spec.snr)?;
        for (i, f) in stack.frames.iter_mut().enumerate() {
            add_noise_to_frame(f, sigma, self.spec.seed, i as u64);
        }
        Ok((stack, sigma))
    }

    /// Uniform-illumination image on the camera grid, without noise.
    pub fn noiseless_widefield(&self, object: &Raster) -> Result<Raster> {
        self.noiseless_subframe(object, &Raster::filled(self.spec.optics.grid, 1.0))
    }
}

/// Output of [`simulate_acquisition`].
#[derive(Debug, Clone)]
pub struct SimulatedAcquisition {
    pub subframes: ImageStack,
    pub widefield: Raster,
    pub noiseless: ImageStack,
    pub noiseless_widefield: Raster,
    pub noise: NoiseReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseReport {
    pub snr: Option<f64>,
    pub subframe_sigma: f64,
    pub widefield_sigma: f64,
}

/// Sub-frames plus a widefield reference taken under uniform illumination
/// at the same SNR.
pub fn simulate_acquisition(phantom: &Phantom, model: &ForwardModel) -> Result<SimulatedAcquisition> {
    let spec = model.spec();
    let noiseless = model.noiseless_stack(&phantom.image)?;
    let (mut subframes, subframe_sigma) = model.add_stack_noise(noiseless.clone())?;
    subframes.labels = (0..subframes.len())
        .map(|i| format!("subframe={i}"))
        .chain([
            format!("modality={}", spec.patterns.modality),
            format!("phantom={}", phantom.description),
            format!("seed={}", spec.seed.0),
        ])
        .collect();

    let noiseless_widefield = model.noiseless_widefield(&phantom.image)?;
    let mut widefield = noiseless_widefield.clone();
    let widefield_sigma = noise_sigma(widefield.max() as f64, spec.snr)?;
    add_noise_to_frame(&mut widefield.data, widefield_sigma, spec.seed, WIDEFIELD_STREAM);

    Ok(SimulatedAcquisition {
        subframes,
        widefield,
        noiseless,
        noiseless_widefield,
        noise: NoiseReport {
            snr: spec.snr,
            subframe_sigma,
            widefield_sigma,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::Fft2d;
    use crate::optics::airy_psf;
    use crate::patterns::{gen_linear_sim, linear_angles, linear_phases};
    use rand::Rng;

    fn optics(side: usize, pitch: f64) -> OpticalModel {
        OpticalModel::new(1.4, 525.0, GridSpec::square(side, pitch).unwrap()).unwrap()
    }

    fn linear_spec(o: OpticalModel, downsample: usize, snr: Option<f64>) -> AcquisitionSpec {
        let p = gen_linear_sim(o.grid, 0.9 * o.f_det(), 1.0, &linear_angles(), &linear_phases()).unwrap();
        AcquisitionSpec::new(o, p, downsample, snr, Seed(5)).unwrap()
    }

    fn random_object(grid: GridSpec, seed: u64) -> Raster {
        let mut rng = Seed(seed).rng("object", 0);
        Raster::from_fn(grid, |_, _| rng.random::<f32>())
    }

    #[test]
    fn spec_validation() {
        let o = optics(64, 20.0);
        let p = gen_linear_sim(o.grid, 0.004, 1.0, &linear_angles(), &linear_phases()).unwrap();
        assert!(AcquisitionSpec::new(o, p.clone(), 3, None, Seed(0)).is_err());
        assert!(AcquisitionSpec::new(o, p.clone(), 2, Some(-1.0), Seed(0)).is_err());
        let other = optics(32, 20.0);
        assert!(AcquisitionSpec::new(other, p, 2, None, Seed(0)).is_err());
    }

    #[test]
    fn uniform_pattern_is_widefield() {
        let o = optics(64, 20.0);
        let spec = AcquisitionSpec::new(o, PatternSet::uniform(o.grid, 1).unwrap(), 1, None, Seed(0)).unwrap();
        let model = ForwardModel::new(spec).unwrap();
        let obj = random_object(o.grid, 1);
        let h = model.forward_subframe(&obj, &Raster::filled(o.grid, 1.0), 0).unwrap();
        let wf = crate::optics::convolve_fft(&obj, model.psf()).unwrap();
        for (a, b) in h.data.iter().zip(&wf.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_object_gives_zero_frame() {
        let o = optics(32, 20.0);
        let model = ForwardModel::new(linear_spec(o, 2, None)).unwrap();
        let h = model
            .forward_subframe(&Raster::zeros(o.grid), &model.spec().patterns.frame(0), 0)
            .unwrap();
        assert!(h.data.iter().all(|&v| v.abs() < 1e-12));
    }

    /// Pixelwise multiply, circular loop convolution, block mean.
    fn spatial_oracle(obj: &Raster, pat: &Raster, psf: &PsfKernel, factor: usize) -> Vec<f64> {
        let (w, h) = (obj.width(), obj.height());
        let (cx, cy) = psf.center();
        let prod: Vec<f64> = obj.data.iter().zip(&pat.data).map(|(&a, &b)| a as f64 * b as f64).collect();
        let mut conv = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..psf.height {
                    for kx in 0..psf.width {
                        let sx = (x + 2 * w + cx - kx) % w;
                        let sy = (y + 2 * h + cy - ky) % h;
                        acc += psf.get(kx, ky) * prod[sy * w + sx];
                    }
                }
                conv[y * w + x] = acc;
            }
        }
        let (ow, oh) = (w / factor, h / factor);
        let mut out = vec![0.0; ow * oh];
        for y in 0..h {
            for x in 0..w {
                out[(y / factor) * ow + x / factor] += conv[y * w + x] / (factor * factor) as f64;
            }
        }
        out
    }

    #[test]
    fn subframe_matches_spatial_oracle() {
        let o = optics(64, 30.0);
        let psf = airy_psf(&o, 2.0).unwrap();
        let model = ForwardModel::with_psf(linear_spec(o, 2, None), psf.clone()).unwrap();
        let obj = random_object(o.grid, 2);
        let pat = model.spec().patterns.frame(4);
        let fast = model.forward_subframe(&obj, &pat, 4).unwrap();
        let slow = spatial_oracle(&obj, &pat, &psf, 2);
        let err = fast.data.iter().zip(&slow).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "max abs diff {err}");
    }

    #[test]
    fn stack_counts_and_linearity() {
        let o = optics(64, 20.0);
        let model = ForwardModel::new(linear_spec(o, 2, None)).unwrap();
        let obj = random_object(o.grid, 3);
        let s1 = model.forward_stack(&obj).unwrap();
        assert_eq!(s1.len(), 9);
        assert_eq!(s1.grid.width, 32);
        let s3 = model.forward_stack(&obj.scaled(3.0)).unwrap();
        for (a, b) in s1.frames.iter().flatten().zip(s3.frames.iter().flatten()) {
            assert!((3.0 * a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        // superposition
        let other = random_object(o.grid, 4);
        let sum = Raster::from_fn(o.grid, |x, y| obj.get(x, y) + other.get(x, y));
        let s_other = model.forward_stack(&other).unwrap();
        let s_sum = model.forward_stack(&sum).unwrap();
        for k in 0..9 {
            for i in 0..s_sum.grid.len() {
                let lhs = s_sum.frames[k][i];
                let rhs = s1.frames[k][i] + s_other.frames[k][i];
                assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn noiseless_stack_ignores_seed() {
        let o = optics(32, 20.0);
        let obj = random_object(o.grid, 5);
        let mut spec = linear_spec(o, 2, None);
        let a = ForwardModel::new(spec.clone()).unwrap().forward_stack(&obj).unwrap();
        spec.seed = Seed(999);
        let b = ForwardModel::new(spec).unwrap().forward_stack(&obj).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn moire_shifts_high_frequency_into_passband() {
        let o = optics(128, 20.0);
        let bin = 1.0 / (128.0 * 20.0);
        let (f_obj, k0) = (20.0 * bin, 12.0 * bin);
        assert!(f_obj > o.f_det() && (f_obj - k0) < o.f_det());
        let obj = Raster::from_fn(o.grid, |x, _| {
            (1.0 + (2.0 * std::f64::consts::PI * f_obj * (x as f64 + 0.5) * 20.0).cos()) as f32 * 0.5
        });
        let p = gen_linear_sim(o.grid, k0, 1.0, &[0.0], &[0.0]).unwrap();
        let spec = AcquisitionSpec::new(o, p, 2, None, Seed(0)).unwrap();
        let model = ForwardModel::new(spec).unwrap();
        let sub = model.forward_stack(&obj).unwrap().frame(0);
        let wf = model.noiseless_widefield(&obj).unwrap();
        let fft = Fft2d::<f64>::new(64, 64);
        let mag = |r: &Raster, k: usize| {
            let d: Vec<f64> = r.data.iter().map(|&v| v as f64).collect();
            fft.forward_real(&d)[k].norm() / d.len() as f64
        };
        // difference frequency sits 8 bins out along x
        assert!(mag(&sub, 8) > 1e-3, "moire term {}", mag(&sub, 8));
        assert!(mag(&wf, 8) < 1e-9);
        assert!(mag(&wf, 20) < 1e-9);
    }

    #[test]
    fn simulate_uniform_noise_free() {
        let o = optics(64, 20.0);
        let spec = AcquisitionSpec::new(o, PatternSet::uniform(o.grid, 3).unwrap(), 2, None, Seed(0)).unwrap();
        let model = ForwardModel::new(spec).unwrap();
        let ph = gen_dot_phantom(o.grid, 5, 2.0, Seed(1)).unwrap();
        let sim = simulate_acquisition(&ph, &model).unwrap();
        for f in sim.subframes.rasters() {
            assert_eq!(f.data, sim.widefield.data);
        }
    }

    #[test]
    fn simulate_noise_level() {
        let o = optics(128, 20.0);
        let model = ForwardModel::new(linear_spec(o, 2, Some(20.0))).unwrap();
        // bright background keeps every sample far from the zero clamp
        let ph = Phantom {
            image: Raster::from_fn(o.grid, |x, y| 0.6 + 0.4 * ((x * 7 + y * 3) % 11) as f32 / 10.0),
            description: "test".into(),
            geometry: None,
        };
        let sim = simulate_acquisition(&ph, &model).unwrap();
        let peak = sim.noiseless.max() as f64;
        let d: Vec<f64> = sim
            .subframes
            .frames
            .iter()
            .flatten()
            .zip(sim.noiseless.frames.iter().flatten())
            .map(|(a, b)| *a as f64 - *b as f64)
            .collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        assert!((sd / (peak / 20.0) - 1.0).abs() < 0.02, "sd {sd} vs {}", peak / 20.0);
        assert!((sim.noise.subframe_sigma - peak / 20.0).abs() < 1e-12);
    }
}
