//! WebAssembly bindings behind `www/index.html`.
//!
//! Everything runs on a fixed 128×128 field at 20 nm pitch with NA 1.4 and
//! 525 nm emission. Each exported call is a thin wrapper over a plain
//! function so the logic can be tested natively.

use pinn_sim::forward::{gen_filament_phantom, gen_two_line_phantom, simulate_acquisition, AcquisitionSpec, ForwardModel, Orientation, Phantom};
use pinn_sim::imgcore::{normalize_raster, upsample_bilinear, GridSpec, Raster, Seed};
use pinn_sim::metrics::two_line_resolved;
use pinn_sim::optics::{otf_magnitude, OpticalModel};
use pinn_sim::patterns::{
    default_linear_k0, default_lpsim_fwhm, default_lpsim_shifts, default_nlsim_k0, gen_linear_sim, gen_lpsim_proxy,
    gen_nlsim, linear_angles, linear_phases, nlsim_angles, nlsim_phases, Modality, PatternSet, LPSIM_DEFAULT_PITCH_NM,
    NLSIM_DEFAULT_AMPS,
};
use wasm_bindgen::prelude::*;

pub const SIDE: usize = 128;
pub const PITCH_NM: f64 = 20.0;
pub const DOWNSAMPLE: usize = 2;

fn optics() -> OpticalModel {
    let grid = GridSpec::square(SIDE, PITCH_NM).expect("fixed grid is valid");
    OpticalModel::new(1.4, 525.0, grid).expect("fixed optics are valid")
}

/// A grey image handed to the page.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

#[wasm_bindgen]
impl Image {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> Vec<f32> {
        self.data.clone()
    }

    /// RGBA bytes scaled so the brightest pixel is white.
    pub fn rgba(&self) -> Vec<u8> {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        self.data
            .iter()
            .flat_map(|&v| {
                let g = (((v - lo) / span) * 255.0).round() as u8;
                [g, g, g, 255]
            })
            .collect()
    }
}

impl From<Raster> for Image {
    fn from(r: Raster) -> Self {
        Image {
            width: r.width(),
            height: r.height(),
            data: r.data,
        }
    }
}

pub fn pattern_set(modality: &str) -> Result<PatternSet, String> {
    let o = optics();
    let m: Modality = modality.parse().map_err(|e: pinn_sim::Error| e.to_string())?;
    let set = match m {
        Modality::LinearSim => gen_linear_sim(o.grid, default_linear_k0(&o), 1.0, &linear_angles(), &linear_phases()),
        Modality::NlSim => gen_nlsim(o.grid, default_nlsim_k0(&o), &NLSIM_DEFAULT_AMPS, &nlsim_angles(), &nlsim_phases()),
        Modality::LpSim => gen_lpsim_proxy(
            o.grid,
            LPSIM_DEFAULT_PITCH_NM,
            default_lpsim_fwhm(&o),
            &default_lpsim_shifts(LPSIM_DEFAULT_PITCH_NM),
        ),
        Modality::Custom => return Err("custom patterns need a file and are not available here".into()),
    };
    set.map_err(|e| e.to_string())
}

pub fn pattern_frame(modality: &str, frame: usize) -> Result<Image, String> {
    let set = pattern_set(modality)?;
    if frame >= set.len() {
        return Err(format!("{} has {} frames, asked for frame {frame}", set.modality, set.len()));
    }
    Ok(set.frame(frame).into())
}

/// Number of frames a modality uses.
#[wasm_bindgen(js_name = frameCount)]
pub fn frame_count(modality: &str) -> Result<usize, JsError> {
    pattern_set(modality).map(|s| s.len()).map_err(|e| JsError::new(&e))
}

/// One illumination pattern.
#[wasm_bindgen]
pub fn pattern(modality: &str, frame: usize) -> Result<Image, JsError> {
    pattern_frame(modality, frame).map_err(|e| JsError::new(&e))
}

/// Widefield, one sub-frame and the ground truth of a simulated
/// acquisition, plus the widefield line-pair verdict.
#[wasm_bindgen]
pub struct Simulation {
    ground_truth: Image,
    widefield: Image,
    subframes: Vec<Image>,
    widefield_dip: f64,
    widefield_resolved: bool,
    separation_nm: f64,
}

#[wasm_bindgen]
impl Simulation {
    #[wasm_bindgen(getter, js_name = groundTruth)]
    pub fn ground_truth(&self) -> Image {
        self.ground_truth.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn widefield(&self) -> Image {
        self.widefield.clone()
    }

    pub fn subframe(&self, i: usize) -> Option<Image> {
        self.subframes.get(i).cloned()
    }

    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.subframes.len()
    }

    /// NaN for phantoms without a line pair.
    #[wasm_bindgen(getter, js_name = widefieldDip)]
    pub fn widefield_dip(&self) -> f64 {
        self.widefield_dip
    }

    #[wasm_bindgen(getter, js_name = widefieldResolved)]
    pub fn widefield_resolved(&self) -> bool {
        self.widefield_resolved
    }

    #[wasm_bindgen(getter, js_name = separationNm)]
    pub fn separation_nm(&self) -> f64 {
        self.separation_nm
    }
}

/// `separation` is a fraction of the Abbe distance; zero or less selects
/// the filament phantom. `snr` ≤ 0 turns noise off.
pub fn run_simulation(modality: &str, separation: f64, snr: f64, seed: u64) -> Result<Simulation, String> {
    let o = optics();
    let patterns = pattern_set(modality)?;
    let phantom: Phantom = if separation > 0.0 {
        gen_two_line_phantom(o.grid, separation * o.d_abbe(), 2.0, Orientation::Vertical)
    } else {
        gen_filament_phantom(o.grid, 12, 0.15, Seed(seed))
    }
    .map_err(|e| e.to_string())?;
    let snr = (snr > 0.0).then_some(snr);
    let spec = AcquisitionSpec::new(o, patterns, DOWNSAMPLE, snr, Seed(seed)).map_err(|e| e.to_string())?;
    let model = ForwardModel::new(spec).map_err(|e| e.to_string())?;
    let acq = simulate_acquisition(&phantom, &model).map_err(|e| e.to_string())?;

    let (mut dip, mut resolved, mut sep) = (f64::NAN, false, f64::NAN);
    if let Some(geom) = &phantom.geometry {
        let up = upsample_bilinear(&acq.widefield, DOWNSAMPLE).map_err(|e| e.to_string())?;
        let up = Raster::new(o.grid, up.data).map_err(|e| e.to_string())?;
        let norm = normalize_raster(&up).map_err(|e| e.to_string())?;
        match two_line_resolved(&norm, geom) {
            Ok(r) => {
                dip = r.dip_contrast;
                resolved = r.resolved;
            }
            // a profile blurred flat is simply unresolved
            Err(pinn_sim::Error::Degenerate(_)) => dip = 0.0,
            Err(e) => return Err(e.to_string()),
        }
        sep = geom.separation_nm();
    }
    Ok(Simulation {
        ground_truth: phantom.image.into(),
        widefield: acq.widefield.into(),
        subframes: acq.subframes.rasters().map(Image::from).collect(),
        widefield_dip: dip,
        widefield_resolved: resolved,
        separation_nm: sep,
    })
}

#[wasm_bindgen]
pub fn simulate(modality: &str, separation: f64, snr: f64, seed: u64) -> Result<Simulation, JsError> {
    run_simulation(modality, separation, snr, seed).map_err(|e| JsError::new(&e))
}

/// Detection OTF with DC in the centre, and the cutoff radius in pixels.
#[wasm_bindgen]
pub struct Transfer {
    image: Image,
    cutoff_px: f64,
    f_det: f64,
}

#[wasm_bindgen]
impl Transfer {
    #[wasm_bindgen(getter)]
    pub fn image(&self) -> Image {
        self.image.clone()
    }

    #[wasm_bindgen(getter, js_name = cutoffPx)]
    pub fn cutoff_px(&self) -> f64 {
        self.cutoff_px
    }

    /// Cycles per nm.
    #[wasm_bindgen(getter, js_name = fDet)]
    pub fn f_det(&self) -> f64 {
        self.f_det
    }
}

pub fn transfer_for(na: f64, wavelength_nm: f64) -> Result<Transfer, String> {
    let grid = GridSpec::square(SIDE, PITCH_NM).map_err(|e| e.to_string())?;
    let o = OpticalModel::new(na, wavelength_nm, grid).map_err(|e| e.to_string())?;
    let spec = AcquisitionSpec::new(o, PatternSet::uniform(grid, 1).map_err(|e| e.to_string())?, 1, None, Seed(0))
        .map_err(|e| e.to_string())?;
    let model = ForwardModel::new(spec).map_err(|e| e.to_string())?;
    let otf = otf_magnitude(model.psf(), &grid).map_err(|e| e.to_string())?;
    let h = SIDE / 2;
    let shifted = Raster::from_fn(grid, |x, y| otf.get((x + h) % SIDE, (y + h) % SIDE));
    Ok(Transfer {
        image: shifted.into(),
        cutoff_px: o.f_det() * SIDE as f64 * PITCH_NM,
        f_det: o.f_det(),
    })
}

#[wasm_bindgen]
pub fn transfer(na: f64, wavelength_nm: f64) -> Result<Transfer, JsError> {
    transfer_for(na, wavelength_nm).map_err(|e| JsError::new(&e))
}
