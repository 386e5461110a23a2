//! Run configuration. Every section and key is optional; omitted keys take
//! the defaults below, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use pinn_sim::forward::Orientation;
use pinn_sim::reconstruct::ReconConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Epoch budget used by `--quick`.
pub const QUICK_EPOCHS: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for phantoms, noise and network initialisation.
    pub seed: u64,
    /// Run directory.
    pub out: PathBuf,
    pub deterministic: bool,
    /// Cap reconstructions at 400 epochs.
    pub quick: bool,
    pub optics: OpticsConfig,
    pub acquisition: AcquisitionConfig,
    pub patterns: PatternConfig,
    pub phantom: PhantomConfig,
    pub recon: ReconConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            deterministic: true,
            quick: false,
            optics: OpticsConfig::default(),
            acquisition: AcquisitionConfig::default(),
            patterns: PatternConfig::default(),
            phantom: PhantomConfig::default(),
            recon: ReconConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsConfig {
    pub na: f64,
    pub wavelength_nm: f64,
    /// Side of the square reconstruction grid in pixels.
    pub grid: usize,
    pub pitch_nm: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            na: 1.4,
            wavelength_nm: 525.0,
            grid: 128,
            pitch_nm: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    /// Camera binning factor (1, 2 or 4).
    pub downsample: usize,
    /// Peak signal over noise sigma; omit for noise-free data.
    pub snr: Option<f64>,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            downsample: 2,
            snr: Some(20.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternConfig {
    /// linear, nlsim or lpsim.
    pub modality: String,
    /// Stripe frequency as a fraction of the detection cutoff. Defaults to
    /// 0.9 for linear and 2/3 for nlsim.
    pub k0_fraction: Option<f64>,
    pub modulation: f64,
    pub harmonic_amps: Vec<f64>,
    pub lattice_pitch_nm: f64,
    /// Hotspot FWHM; defaults to the width reaching twice the detection cutoff.
    pub hotspot_fwhm_nm: Option<f64>,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            modality: "linear".into(),
            k0_fraction: None,
            modulation: 1.0,
            harmonic_amps: pinn_sim::patterns::NLSIM_DEFAULT_AMPS.to_vec(),
            lattice_pitch_nm: pinn_sim::patterns::LPSIM_DEFAULT_PITCH_NM,
            hotspot_fwhm_nm: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    TwoLine,
    Filament,
    Dots,
    SiemensStar,
    /// A RAW32 ground truth read from `path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub kind: PhantomKind,
    /// Two-line centre distance as a fraction of the Abbe limit.
    pub separation_fraction: f64,
    pub line_width_px: f64,
    pub orientation: Orientation,
    /// Filament or dot count.
    pub count: usize,
    pub curvature: f64,
    pub radius_px: f64,
    pub spokes: usize,
    pub path: Option<PathBuf>,
    /// Gaussian smoothing applied before normalisation, in pixels.
    pub smooth_sigma_px: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            kind: PhantomKind::TwoLine,
            separation_fraction: 0.55,
            line_width_px: 2.0,
            orientation: Orientation::Vertical,
            count: 12,
            curvature: 0.15,
            radius_px: 1.5,
            spokes: 16,
            path: None,
            smooth_sigma_px: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub snrs: Vec<f64>,
    /// Fractions of the Abbe limit.
    pub separations: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            snrs: vec![20.0, 15.0, 12.0, 10.0, 7.5, 5.0],
            separations: vec![1.0, 0.7, 0.55, 0.45],
        }
    }
}

/// `manifest.json` written by earlier commands may be used as a config.
#[derive(Deserialize)]
struct ManifestConfig {
    config: RunConfig,
}

impl RunConfig {
    /// Reads TOML, or JSON (a bare config or a run manifest) for `.json` paths.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Missing(format!("cannot read config {}: {e}", path.display())))?;
        let bad = |e: String| CliError::Config(format!("{}: {e}", path.display()));
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            if value.get("config").is_some() {
                let m: ManifestConfig = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
                return Ok(m.config);
            }
            return serde_json::from_value(value).map_err(|e| bad(e.to_string()));
        }
        toml::from_str(&text).map_err(|e| bad(e.to_string()))
    }

    /// Epoch budget after `--quick`.
    pub fn effective_recon(&self) -> ReconConfig {
        let mut r = self.recon.clone();
        r.seed = self.seed;
        r.deterministic = self.deterministic;
        if self.quick {
            r.epochs = r.epochs.min(QUICK_EPOCHS);
        }
        r
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: pinn_sim::Error| CliError::Config(e.to_string());
        self.effective_recon().validate().map_err(cfg)?;
        if self.optics.grid == 0 || !(self.optics.pitch_nm > 0.0) {
            return Err(CliError::Config("optics.grid and optics.pitch_nm must be positive".into()));
        }
        self.patterns
            .modality
            .parse::<pinn_sim::patterns::Modality>()
            .map_err(cfg)?;
        if self.phantom.kind == PhantomKind::File && self.phantom.path.is_none() {
            return Err(CliError::Config("phantom.kind = \"file\" needs phantom.path".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
        let empty: RunConfig = toml::from_str("").unwrap();
        assert_eq!(empty, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[optics]\nnaa = 1.2").is_err());
        assert!(toml::from_str::<RunConfig>("[recon]\nlearning_rate = 1e-3").is_err());
    }

    #[test]
    fn quick_caps_epochs() {
        let c = RunConfig { quick: true, ..RunConfig::default() };
        assert_eq!(c.effective_recon().epochs, QUICK_EPOCHS);
    }
}
