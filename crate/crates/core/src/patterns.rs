//! Illumination pattern sets for linear SIM, saturated (nonlinear) SIM and a
//! plasmonic hotspot-lattice stand-in, plus RAW32 pattern files.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{load_raster, save_raster, GridSpec, ImageStack, Raster};
use crate::optics::OpticalModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "LinearSIM")]
    LinearSim,
    #[serde(rename = "NLSIM")]
    NlSim,
    #[serde(rename = "LPSIM")]
    LpSim,
    Custom,
}

impl Modality {
    pub const VALID: &'static str = "linear, nlsim, lpsim, custom";
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::LinearSim => "LinearSIM",
            Modality::NlSim => "NLSIM",
            Modality::LpSim => "LPSIM",
            Modality::Custom => "Custom",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "linearsim" | "sim" => Ok(Modality::LinearSim),
            "nlsim" | "nl-sim" | "nonlinear" => Ok(Modality::NlSim),
            "lpsim" | "lattice" => Ok(Modality::LpSim),
            "custom" => Ok(Modality::Custom),
            other => Err(Error::invalid(format!(
                "unknown modality {other:?}; valid modalities: {}",
                Modality::VALID
            ))),
        }
    }
}

/// Generator parameters recorded alongside a pattern set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatternParams {
    Sinusoidal {
        k0: f64,
        harmonic_amps: Vec<f64>,
        angles: Vec<f64>,
        phases: Vec<f64>,
        offset: f64,
    },
    Lattice {
        lattice_pitch_nm: f64,
        hotspot_fwhm_nm: f64,
        shifts_nm: Vec<(f64, f64)>,
    },
    External,
}

/// Stack of illumination patterns on the object grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    pub stack: ImageStack,
    pub modality: Modality,
    /// Highest illumination frequency in cycles/nm.
    pub f_ill: f64,
    pub params: PatternParams,
}

const LABEL_MODALITY: &str = "modality";
const LABEL_F_ILL: &str = "f_ill_cyc_per_nm";
const LABEL_PARAMS: &str = "params";

impl PatternSet {
    fn assemble(
        grid: GridSpec,
        frames: Vec<Vec<f32>>,
        modality: Modality,
        f_ill: f64,
        params: PatternParams,
    ) -> Result<Self> {
        let mut stack = ImageStack::new(grid, frames)?;
        stack.labels = vec![
            format!("{LABEL_MODALITY}={modality}"),
            format!("{LABEL_F_ILL}={f_ill}"),
            format!(
                "{LABEL_PARAMS}={}",
                serde_json::to_string(&params).expect("params serialise")
            ),
        ];
        let set = Self {
            stack,
            modality,
            f_ill,
            params,
        };
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<()> {
        if self.stack.is_empty() {
            return Err(Error::invalid("pattern set has no frames"));
        }
        if !self.stack.is_finite() {
            return Err(Error::NonFinite("pattern sample".into()));
        }
        if let Some((i, v)) = self
            .stack
            .frames
            .iter()
            .flatten()
            .enumerate()
            .find(|(_, v)| **v < 0.0)
        {
            return Err(Error::invalid(format!(
                "pattern sample {i} is negative ({v})"
            )));
        }
        for (i, f) in self.stack.frames.iter().enumerate() {
            if !(f.iter().map(|&v| v as f64).sum::<f64>() > 0.0) {
                return Err(Error::invalid(format!("pattern frame {i} has zero mean")));
            }
        }
        if !(self.f_ill >= 0.0 && self.f_ill.is_finite()) {
            return Err(Error::invalid(format!("f_ill must be >= 0, got {}", self.f_ill)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.stack.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stack.is_empty()
    }

    pub fn grid(&self) -> GridSpec {
        self.stack.grid
    }

    pub fn frame(&self, i: usize) -> Raster {
        self.stack.frame(i)
    }

    /// Uniform illumination with the same frame count (widefield reduction).
    pub fn uniform(grid: GridSpec, frames: usize) -> Result<Self> {
        Self::assemble(
            grid,
            vec![vec![1.0; grid.len()]; frames],
            Modality::Custom,
            0.0,
            PatternParams::External,
        )
    }
}

pub fn deg(d: f64) -> f64 {
    d.to_radians()
}

/// `count` values `step` degrees apart, starting at 0.
pub fn evenly_spaced(count: usize, step_deg: f64) -> Vec<f64> {
    (0..count).map(|i| deg(i as f64 * step_deg)).collect()
}

/// Three orientations 60° apart.
pub fn linear_angles() -> Vec<f64> {
    evenly_spaced(3, 60.0)
}

/// Three phases 120° apart.
pub fn linear_phases() -> Vec<f64> {
    evenly_spaced(3, 120.0)
}

/// Five orientations 36° apart.
pub fn nlsim_angles() -> Vec<f64> {
    evenly_spaced(5, 36.0)
}

/// Five phases 72° apart.
pub fn nlsim_phases() -> Vec<f64> {
    evenly_spaced(5, 72.0)
}

pub const NLSIM_DEFAULT_AMPS: [f64; 3] = [1.0, 0.5, 0.25];

/// Linear SIM stripe frequency used for simulations.
pub fn default_linear_k0(optics: &OpticalModel) -> f64 {
    0.9 * optics.f_det()
}

/// Stripe frequency matching typical experimental data.
pub fn experimental_linear_k0(optics: &OpticalModel) -> f64 {
    0.7 * optics.f_det()
}

/// Base frequency that puts the third harmonic at twice the detection cutoff.
pub fn default_nlsim_k0(optics: &OpticalModel) -> f64 {
    2.0 / 3.0 * optics.f_det()
}

pub const LPSIM_DEFAULT_PITCH_NM: f64 = 200.0;

/// Hotspot FWHM whose Gaussian spectrum falls to 1e-2 of DC at 2·f_det.
pub fn default_lpsim_fwhm(optics: &OpticalModel) -> f64 {
    let sigma = gaussian_sigma_for_cutoff(2.0 * optics.f_det());
    sigma * FWHM_PER_SIGMA
}

const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949; // 2·sqrt(2 ln 2)
const SPECTRAL_FLOOR: f64 = 1e-2;

fn gaussian_sigma_for_cutoff(f: f64) -> f64 {
    // exp(-2 π² σ² f²) = floor
    (-(SPECTRAL_FLOOR.ln()) / (2.0 * PI * PI)).sqrt() / f
}

/// Frequency (cycles/nm) at which a Gaussian hotspot's spectrum drops to 1e-2 of DC.
pub fn gaussian_spectral_cutoff(fwhm_nm: f64) -> f64 {
    gaussian_sigma_for_cutoff(1.0) / (fwhm_nm / FWHM_PER_SIGMA)
}

/// 12 × 2 offsets tiling the lattice unit cell.
pub fn default_lpsim_shifts(lattice_pitch_nm: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(24);
    for j in 0..2 {
        for i in 0..12 {
            out.push((
                i as f64 * lattice_pitch_nm / 12.0,
                j as f64 * lattice_pitch_nm / 2.0,
            ));
        }
    }
    out
}

#[inline]
fn pixel_position(i: usize, pitch: f64) -> f64 {
    (i as f64 + 0.5) * pitch
}

fn check_lists(angles: &[f64], phases: &[f64]) -> Result<()> {
    if angles.is_empty() || phases.is_empty() {
        return Err(Error::invalid("angle and phase lists must be non-empty"));
    }
    Ok(())
}

fn sinusoidal_frames(
    grid: GridSpec,
    k0: f64,
    amps: &[f64],
    angles: &[f64],
    phases: &[f64],
    offset: f64,
) -> Vec<Vec<f32>> {
    let mut frames = Vec::with_capacity(angles.len() * phases.len());
    for &theta in angles {
        let (ux, uy) = (theta.cos(), theta.sin());
        for &phi in phases {
            let mut f = Vec::with_capacity(grid.len());
            for y in 0..grid.height {
                let py = pixel_position(y, grid.pitch_nm);
                for x in 0..grid.width {
                    let px = pixel_position(x, grid.pitch_nm);
                    let psi = 2.0 * PI * k0 * (px * ux + py * uy) + phi;
                    let mut v = 1.0 + offset;
                    for (h, a) in amps.iter().enumerate() {
                        v += a * ((h + 1) as f64 * psi).cos();
                    }
                    f.push(v.max(0.0) as f32);
                }
            }
            frames.push(f);
        }
    }
    frames
}

/// Stripes `1 + m·cos(2π k0 r·û(θ) + φ)`, angle-major.
pub fn gen_linear_sim(
    grid: GridSpec,
    k0: f64,
    modulation: f64,
    angles: &[f64],
    phases: &[f64],
) -> Result<PatternSet> {
    check_lists(angles, phases)?;
    if !(modulation > 0.0 && modulation <= 1.0) {
        return Err(Error::invalid(format!(
            "modulation must be in (0, 1], got {modulation}"
        )));
    }
    check_frequency(k0, &grid, "k0")?;
    let amps = vec![modulation];
    let frames = sinusoidal_frames(grid, k0, &amps, angles, phases, 0.0);
    PatternSet::assemble(
        grid,
        frames,
        Modality::LinearSim,
        k0,
        PatternParams::Sinusoidal {
            k0,
            harmonic_amps: amps,
            angles: angles.to_vec(),
            phases: phases.to_vec(),
            offset: 0.0,
        },
    )
}

fn check_frequency(f: f64, grid: &GridSpec, what: &str) -> Result<()> {
    if !(f > 0.0) {
        return Err(Error::invalid(format!("{what} must be > 0, got {f}")));
    }
    if f > grid.nyquist() {
        return Err(Error::invalid(format!(
            "{what} = {f:.4e} cyc/nm exceeds grid Nyquist {:.4e}",
            grid.nyquist()
        )));
    }
    Ok(())
}

/// Minimum over ψ of Σ a_h cos(h ψ), by dense sampling plus local refinement.
fn harmonic_minimum(amps: &[f64]) -> f64 {
    let eval = |psi: f64| -> f64 {
        amps.iter()
            .enumerate()
            .map(|(h, a)| a * ((h + 1) as f64 * psi).cos())
            .sum()
    };
    let n = 8192;
    let step = 2.0 * PI / n as f64;
    let (mut best_psi, mut best) = (0.0, f64::INFINITY);
    for i in 0..n {
        let psi = i as f64 * step;
        let v = eval(psi);
        if v < best {
            best = v;
            best_psi = psi;
        }
    }
    // golden-section refinement inside the bracketing cell
    let (mut lo, mut hi) = (best_psi - step, best_psi + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if eval(a) < eval(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    best.min(eval(0.5 * (lo + hi)))
}

/// Saturated SIM: `1 + Σ_h a_h·cos(h·(2π k0 r·û(θ) + φ))`, shifted up when the
/// harmonic sum would otherwise go negative. `f_ill = H·k0`.
pub fn gen_nlsim(
    grid: GridSpec,
    k0: f64,
    harmonic_amps: &[f64],
    angles: &[f64],
    phases: &[f64],
) -> Result<PatternSet> {
    check_lists(angles, phases)?;
    if harmonic_amps.is_empty() || harmonic_amps.iter().any(|a| !a.is_finite()) {
        return Err(Error::invalid("harmonic amplitudes must be non-empty and finite"));
    }
    let highest = harmonic_amps.len() as f64 * k0;
    check_frequency(k0, &grid, "k0")?;
    check_frequency(highest, &grid, "highest harmonic")?;
    let offset = (-(1.0 + harmonic_minimum(harmonic_amps))).max(0.0);
    let frames = sinusoidal_frames(grid, k0, harmonic_amps, angles, phases, offset);
    PatternSet::assemble(
        grid,
        frames,
        Modality::NlSim,
        highest,
        PatternParams::Sinusoidal {
            k0,
            harmonic_amps: harmonic_amps.to_vec(),
            angles: angles.to_vec(),
            phases: phases.to_vec(),
            offset,
        },
    )
}

/// Square lattice of Gaussian hotspots translated by each offset in `shifts`.
/// `f_ill` is where the hotspot spectrum falls to 1e-2 of its DC value.
pub fn gen_lpsim_proxy(
    grid: GridSpec,
    lattice_pitch_nm: f64,
    hotspot_fwhm_nm: f64,
    shifts: &[(f64, f64)],
) -> Result<PatternSet> {
    if shifts.is_empty() {
        return Err(Error::invalid("LPSIM needs at least one lattice offset"));
    }
    if !(hotspot_fwhm_nm >= 2.0 * grid.pitch_nm) {
        return Err(Error::invalid(format!(
            "hotspot FWHM {hotspot_fwhm_nm} nm is below the grid support (2 x {} nm)",
            grid.pitch_nm
        )));
    }
    if !(lattice_pitch_nm > 0.0) {
        return Err(Error::invalid("lattice pitch must be > 0"));
    }
    let sigma = hotspot_fwhm_nm / FWHM_PER_SIGMA;
    let reach = 8.0 * sigma;
    let comb = |n: usize, shift: f64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = pixel_position(i, grid.pitch_nm) - shift;
                let m_lo = ((t - reach) / lattice_pitch_nm).floor() as i64;
                let m_hi = ((t + reach) / lattice_pitch_nm).ceil() as i64;
                (m_lo..=m_hi)
                    .map(|m| {
                        let d = t - m as f64 * lattice_pitch_nm;
                        (-d * d / (2.0 * sigma * sigma)).exp()
                    })
                    .sum()
            })
            .collect()
    };
    let mut frames = Vec::with_capacity(shifts.len());
    for &(sx, sy) in shifts {
        let gx = comb(grid.width, sx);
        let gy = comb(grid.height, sy);
        let mut f = Vec::with_capacity(grid.len());
        for &vy in &gy {
            for &vx in &gx {
                f.push((vx * vy) as f32);
            }
        }
        frames.push(f);
    }
    let f_ill = gaussian_spectral_cutoff(hotspot_fwhm_nm);
    PatternSet::assemble(
        grid,
        frames,
        Modality::LpSim,
        f_ill,
        PatternParams::Lattice {
            lattice_pitch_nm,
            hotspot_fwhm_nm,
            shifts_nm: shifts.to_vec(),
        },
    )
}

pub fn save_patterns(set: &PatternSet, path: impl AsRef<Path>) -> Result<()> {
    save_raster(&set.stack, path)
}

/// Reads a RAW32 pattern stack. The sidecar must carry `f_ill_cyc_per_nm=`;
/// `modality=` defaults to Custom when absent.
pub fn load_patterns(path: impl AsRef<Path>) -> Result<PatternSet> {
    let stack = load_raster(path)?;
    let f_ill: f64 = stack
        .label_value(LABEL_F_ILL)
        .ok_or_else(|| Error::MissingField(LABEL_F_ILL.into()))?
        .parse()
        .map_err(|e| Error::invalid(format!("{LABEL_F_ILL}: {e}")))?;
    let modality = match stack.label_value(LABEL_MODALITY) {
        Some(m) => m.parse()?,
        None => Modality::Custom,
    };
    let params = match stack.label_value(LABEL_PARAMS) {
        Some(p) => serde_json::from_str(p)
            .map_err(|e| Error::invalid(format!("pattern params label: {e}")))?,
        None => PatternParams::External,
    };
    let set = PatternSet {
        stack,
        modality,
        f_ill,
        params,
    };
    set.check()?;
    Ok(set)
}
