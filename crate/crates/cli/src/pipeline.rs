//! Simulate, reconstruct and evaluate a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use pinn_sim::diffcore::SsimParams;
use pinn_sim::forward::{
    gen_dot_phantom, gen_filament_phantom, gen_siemens_star, gen_two_line_phantom, prepare_ground_truth,
    simulate_acquisition, AcquisitionSpec, ForwardModel, Phantom, TwoLineGeometry,
};
use pinn_sim::imgcore::{
    load_raster, normalize_raster, normalize_unit, raw32_paths, save_pgm, save_raster, upsample_bilinear, GridSpec,
    ImageStack, Raster, Seed,
};
use pinn_sim::metrics::{compare, spectral_support, two_line_resolved, MetricsReport, DEFAULT_NOISE_PERCENTILE, SPECTRAL_MIN_SIDE};
use pinn_sim::network::load_checkpoint;
use pinn_sim::optics::OpticalModel;
use pinn_sim::patterns::{
    default_lpsim_fwhm, default_lpsim_shifts, default_nlsim_k0, gen_linear_sim, gen_lpsim_proxy, gen_nlsim,
    linear_angles, linear_phases, load_patterns, nlsim_angles, nlsim_phases, save_patterns, Modality, PatternSet,
};
use pinn_sim::reconstruct::{ArtifactWriter, LossReport, ReconConfig, ReconOutput, Reconstruction};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{PhantomKind, RunConfig};
use crate::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const SUBFRAMES: &str = "subframes";
pub const WIDEFIELD: &str = "widefield";
pub const GROUND_TRUTH: &str = "ground_truth";
pub const PATTERNS: &str = "patterns";
pub const PSF: &str = "psf";
pub const RECONSTRUCTION: &str = "reconstruction";
pub const METRICS: &str = "metrics.json";

pub fn optics(cfg: &RunConfig) -> CliResult<OpticalModel> {
    let grid = GridSpec::square(cfg.optics.grid, cfg.optics.pitch_nm)?;
    Ok(OpticalModel::new(cfg.optics.na, cfg.optics.wavelength_nm, grid)?)
}

pub fn patterns(cfg: &RunConfig, o: &OpticalModel) -> CliResult<PatternSet> {
    let p = &cfg.patterns;
    let modality: Modality = p.modality.parse().map_err(|e: pinn_sim::Error| CliError::Config(e.to_string()))?;
    let set = match modality {
        Modality::LinearSim => {
            let k0 = p.k0_fraction.unwrap_or(0.9) * o.f_det();
            gen_linear_sim(o.grid, k0, p.modulation, &linear_angles(), &linear_phases())?
        }
        Modality::NlSim => {
            let k0 = p.k0_fraction.map_or(default_nlsim_k0(o), |f| f * o.f_det());
            gen_nlsim(o.grid, k0, &p.harmonic_amps, &nlsim_angles(), &nlsim_phases())?
        }
        Modality::LpSim => {
            let fwhm = p.hotspot_fwhm_nm.unwrap_or_else(|| default_lpsim_fwhm(o));
            gen_lpsim_proxy(o.grid, p.lattice_pitch_nm, fwhm, &default_lpsim_shifts(p.lattice_pitch_nm))?
        }
        Modality::Custom => {
            return Err(CliError::Config(format!(
                "modality `custom` needs a patterns file; generated modalities are linear, nlsim, lpsim"
            )))
        }
    };
    Ok(set)
}

pub fn phantom(cfg: &RunConfig, o: &OpticalModel) -> CliResult<Phantom> {
    let ph = &cfg.phantom;
    let seed = Seed(cfg.seed);
    let raw = match ph.kind {
        PhantomKind::TwoLine => gen_two_line_phantom(
            o.grid,
            ph.separation_fraction * o.d_abbe(),
            ph.line_width_px,
            ph.orientation,
        )?,
        PhantomKind::Filament => gen_filament_phantom(o.grid, ph.count, ph.curvature, seed)?,
        PhantomKind::Dots => gen_dot_phantom(o.grid, ph.count, ph.radius_px, seed)?,
        PhantomKind::SiemensStar => gen_siemens_star(o.grid, ph.spokes)?,
        PhantomKind::File => {
            let path = ph.path.as_ref().ok_or_else(|| CliError::Config("phantom.path is not set".into()))?;
            let image = load_raster(path)?.frame(0);
            if image.grid != o.grid {
                return Err(CliError::Config(format!(
                    "ground truth {} is {}x{} @ {} nm, optics grid is {}x{} @ {} nm",
                    path.display(),
                    image.width(),
                    image.height(),
                    image.grid.pitch_nm,
                    o.grid.width,
                    o.grid.height,
                    o.grid.pitch_nm
                )));
            }
            prepare_ground_truth(&image, 0.0)?
        }
    };
    if ph.smooth_sigma_px > 0.0 {
        let geometry = raw.geometry;
        let mut p = raw.prepared(ph.smooth_sigma_px)?;
        p.geometry = geometry;
        Ok(p)
    } else {
        Ok(raw)
    }
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serialises");
    fs::write(path, text + "\n").map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))
}

pub fn read_manifest(dir: &Path) -> CliResult<Value> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|_| CliError::Missing(format!("{} not found; run `simulate` first", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn require(dir: &Path, name: &str, hint: &str) -> CliResult<PathBuf> {
    let base = dir.join(name);
    let (json, payload) = raw32_paths(&base);
    for p in [&json, &payload] {
        if !p.exists() {
            return Err(CliError::Missing(format!("{} not found{hint}", p.display())));
        }
    }
    Ok(base)
}

fn save_image(dir: &Path, name: &str, r: &Raster) -> CliResult<()> {
    save_raster(&r.clone().into_stack(), dir.join(name))?;
    Ok(())
}

/// Writes the pattern stack and one PGM preview per frame.
pub fn cmd_patterns(cfg: &RunConfig) -> CliResult<PatternSet> {
    cfg.validate()?;
    let o = optics(cfg)?;
    let set = patterns(cfg, &o)?;
    ensure_dir(&cfg.out)?;
    save_patterns(&set, cfg.out.join(PATTERNS))?;
    for (i, r) in set.stack.rasters().enumerate() {
        save_pgm(&r, cfg.out.join(format!("pattern_{i}.pgm")))?;
    }
    write_json(
        &cfg.out.join(MANIFEST),
        &json!({
            "command": "patterns",
            "config": cfg,
            "patterns": {"modality": set.modality, "frames": set.len(), "f_ill_cyc_per_nm": set.f_ill},
        }),
    )?;
    Ok(set)
}

/// Noise actually applied, as recorded in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub snr: Option<f64>,
    pub subframe_sigma: f64,
    pub widefield_sigma: f64,
}

/// Simulates one acquisition into `cfg.out`.
pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<NoiseRecord> {
    cfg.validate()?;
    let o = optics(cfg)?;
    let set = patterns(cfg, &o)?;
    let ph = phantom(cfg, &o)?;
    let spec = AcquisitionSpec::new(o, set, cfg.acquisition.downsample, cfg.acquisition.snr, Seed(cfg.seed))?;
    let model = ForwardModel::new(spec)?;
    let acq = simulate_acquisition(&ph, &model)?;
    let dir = &cfg.out;
    ensure_dir(dir)?;
    save_image(dir, GROUND_TRUTH, &ph.image)?;
    save_patterns(&model.spec().patterns, dir.join(PATTERNS))?;
    save_raster(&acq.subframes, dir.join(SUBFRAMES))?;
    save_image(dir, WIDEFIELD, &acq.widefield)?;
    save_image(dir, PSF, &model.psf().to_raster()?)?;
    save_pgm(&acq.widefield, dir.join("widefield.pgm"))?;
    save_pgm(&ph.image, dir.join("ground_truth.pgm"))?;
    let noise = NoiseRecord {
        snr: acq.noise.snr,
        subframe_sigma: acq.noise.subframe_sigma,
        widefield_sigma: acq.noise.widefield_sigma,
    };
    write_json(
        &dir.join(MANIFEST),
        &json!({
            "command": "simulate",
            "config": cfg,
            "optics": {"f_det_cyc_per_nm": o.f_det(), "d_abbe_nm": o.d_abbe()},
            "patterns": {
                "modality": model.spec().patterns.modality,
                "frames": model.spec().frames(),
                "f_ill_cyc_per_nm": model.spec().patterns.f_ill,
            },
            "phantom": {"description": ph.description, "geometry": ph.geometry},
            "noise": noise,
        }),
    )?;
    Ok(noise)
}

/// Command-line adjustments applied on top of the run's configuration.
#[derive(Debug, Clone, Default)]
pub struct ReconOverrides {
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    /// Continue from `checkpoint_last` in the run directory.
    pub resume: bool,
    pub verbose: bool,
}

/// Reconstructs the run in `dir` with `cfg` plus `ov`.
pub fn cmd_reconstruct(cfg: &RunConfig, dir: &Path, ov: &ReconOverrides) -> CliResult<ReconOutput> {
    let mut manifest = read_manifest(dir)?;
    let pat_path = require(dir, PATTERNS, "; the run directory has no patterns")?;
    let sub_path = require(dir, SUBFRAMES, "; the run directory has no sub-frames")?;
    let mut recon = cfg.effective_recon();
    if let Some(lr) = ov.lr {
        recon.lr = lr;
    }
    if let Some(e) = ov.epochs {
        recon.epochs = e;
    }
    recon.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let o = optics(cfg)?;
    let set = load_patterns(&pat_path)?;
    let measured = load_raster(&sub_path)?;
    let measured = normalize_unit(&measured)?;
    let spec = AcquisitionSpec::new(o, set, cfg.acquisition.downsample, cfg.acquisition.snr, Seed(cfg.seed))?;
    let model = ForwardModel::new(spec)?;
    let mut r = if ov.resume {
        let last = require(dir, "checkpoint_last", "; nothing to resume")?;
        let ck = load_checkpoint(last)?;
        let best = load_checkpoint(dir.join("checkpoint_best")).ok();
        Reconstruction::resume(&measured, &model, &recon, &ck, best.as_ref())?
    } else {
        Reconstruction::new(&measured, &model, &recon)?
    };
    let mut writer = ArtifactWriter::new(dir)?;
    writer.verbose = ov.verbose;
    let out = writer.run(&mut r)?;
    save_pgm(&out.estimate, dir.join("reconstruction.pgm"))?;
    manifest["config_reconstruct"] = json!(cfg);
    manifest["reconstruction"] = json!({
        "recon": recon,
        "network": r.network_config(),
        "parameters": r.network_config().param_count(),
        "epochs_run": out.report.len(),
        "initial_loss": out.report.losses.first(),
        "final_loss": out.report.final_loss,
        "best_loss": out.report.best_loss,
        "best_epoch": out.report.best_epoch,
        "stopped_early": out.report.stopped_early,
        "restarts": out.report.restarts,
        "seconds": out.report.seconds.last(),
    });
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedRecord {
    pub resolved: bool,
    pub dip_contrast: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralRecord {
    pub reconstruction_cutoff_cyc_per_nm: f64,
    pub widefield_cutoff_cyc_per_nm: f64,
    pub ratio: f64,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub reconstruction_vs_ground_truth: Option<MetricsReport>,
    pub widefield_vs_ground_truth: Option<MetricsReport>,
    pub spectral_support: Option<SpectralRecord>,
    pub reconstruction_two_line: Option<ResolvedRecord>,
    pub widefield_two_line: Option<ResolvedRecord>,
    pub ground_truth_two_line: Option<ResolvedRecord>,
}

fn write_profile(path: &Path, pos: &[f64], values: &[f64]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Other(e.to_string()))?;
    w.write_record(["position_nm", "value"]).map_err(|e| CliError::Other(e.to_string()))?;
    for (p, v) in pos.iter().zip(values) {
        w.write_record([format!("{p:.3}"), format!("{v:.6e}")])
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Other(e.to_string()))
}

/// Widefield brought onto the object grid for image comparisons.
pub fn widefield_on_grid(widefield: &Raster, grid: GridSpec) -> CliResult<Raster> {
    let factor = grid.width / widefield.width();
    let up = upsample_bilinear(widefield, factor.max(1))?;
    if up.width() != grid.width || up.height() != grid.height {
        return Err(CliError::Other("widefield does not tile the object grid".into()));
    }
    Ok(Raster::new(grid, up.data)?)
}

/// Spectral support ratio; the widefield is measured on its native camera grid.
pub fn spectral_record(recon: &Raster, widefield: &Raster) -> CliResult<Option<SpectralRecord>> {
    let small = |r: &Raster| r.width().min(r.height()) < SPECTRAL_MIN_SIDE;
    if small(recon) || small(widefield) {
        return Ok(None);
    }
    let a = spectral_support(recon, DEFAULT_NOISE_PERCENTILE)?;
    let b = spectral_support(widefield, DEFAULT_NOISE_PERCENTILE)?;
    if !(b.cutoff > 0.0) {
        return Ok(None);
    }
    Ok(Some(SpectralRecord {
        reconstruction_cutoff_cyc_per_nm: a.cutoff,
        widefield_cutoff_cyc_per_nm: b.cutoff,
        ratio: a.cutoff / b.cutoff,
    }))
}

fn two_line(dir: &Path, name: &str, image: &Raster, geom: &TwoLineGeometry) -> CliResult<ResolvedRecord> {
    let r = two_line_resolved(image, geom)?;
    write_profile(&dir.join(format!("profile_{name}.csv")), &r.positions_nm, &r.profile)?;
    Ok(ResolvedRecord {
        resolved: r.resolved,
        dip_contrast: r.dip_contrast,
    })
}

/// Scores the reconstruction in `dir` and writes `metrics.json`.
pub fn cmd_evaluate(dir: &Path) -> CliResult<Evaluation> {
    let mut manifest = read_manifest(dir)?;
    let rec_path = require(dir, RECONSTRUCTION, "; run `reconstruct` first")?;
    let wf_path = require(dir, WIDEFIELD, "")?;
    let recon = load_raster(rec_path)?.frame(0);
    let widefield = load_raster(wf_path)?.frame(0);
    let ssim = manifest
        .pointer("/reconstruction/recon/ssim")
        .and_then(|v| serde_json::from_value::<SsimParams>(v.clone()).ok())
        .unwrap_or_default();
    let geometry: Option<TwoLineGeometry> = manifest
        .pointer("/phantom/geometry")
        .and_then(|v| serde_json::from_value(v.clone()).ok());

    let recon_n = normalize_raster(&recon)?;
    let wf_grid = widefield_on_grid(&widefield, recon.grid)?;
    let wf_n = normalize_raster(&wf_grid)?;
    let gt = raw32_paths(dir.join(GROUND_TRUTH)).1.exists();
    let mut eval = Evaluation {
        reconstruction_vs_ground_truth: None,
        widefield_vs_ground_truth: None,
        spectral_support: spectral_record(&recon_n, &widefield)?,
        reconstruction_two_line: None,
        widefield_two_line: None,
        ground_truth_two_line: None,
    };
    if gt {
        let truth = normalize_raster(&load_raster(dir.join(GROUND_TRUTH))?.frame(0))?;
        eval.reconstruction_vs_ground_truth = Some(compare(&recon_n, &truth, GROUND_TRUTH, &ssim)?);
        eval.widefield_vs_ground_truth = Some(compare(&wf_n, &truth, GROUND_TRUTH, &ssim)?);
        if let Some(g) = &geometry {
            eval.reconstruction_two_line = Some(two_line(dir, RECONSTRUCTION, &recon_n, g)?);
            eval.widefield_two_line = Some(two_line(dir, WIDEFIELD, &wf_n, g)?);
            eval.ground_truth_two_line = Some(two_line(dir, GROUND_TRUTH, &truth, g)?);
        }
    }
    let value = serde_json::to_value(&eval).expect("evaluation serialises");
    let trimmed = Value::Object(
        value
            .as_object()
            .expect("struct")
            .iter()
            .filter(|(_, v)| !v.is_null())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    );
    write_json(&dir.join(METRICS), &trimmed)?;
    manifest["evaluation"] = trimmed;
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(eval)
}

/// One CSV row of `snr_sweep.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct SnrRow {
    pub snr: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
    pub resolved: bool,
    pub dip: f64,
}

/// One CSV row of `resolution_sweep.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct SeparationRow {
    pub separation_fraction: f64,
    pub separation_nm: f64,
    pub widefield_resolved: bool,
    pub widefield_dip: f64,
    pub resolved: bool,
    pub dip: f64,
}

fn label(v: f64) -> String {
    format!("{v}").replace('.', "p")
}

/// simulate, reconstruct and evaluate in one directory.
pub fn full_run(cfg: &RunConfig, ov: &ReconOverrides) -> CliResult<(LossReport, Evaluation)> {
    cmd_simulate(cfg)?;
    let out = cmd_reconstruct(cfg, &cfg.out, ov)?;
    Ok((out.report, cmd_evaluate(&cfg.out)?))
}

fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Other(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Other(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Other(e.to_string()))
}

pub fn cmd_snr_sweep(cfg: &RunConfig, snrs: &[f64], ov: &ReconOverrides) -> CliResult<Vec<SnrRow>> {
    if snrs.is_empty() {
        return Err(CliError::Config("SNR list is empty".into()));
    }
    cfg.validate()?;
    let mut rows = Vec::new();
    for &snr in snrs {
        let mut c = cfg.clone();
        c.acquisition.snr = Some(snr);
        c.out = cfg.out.join(format!("snr_{}", label(snr)));
        let (_, e) = full_run(&c, ov)?;
        let m = e
            .reconstruction_vs_ground_truth
            .ok_or_else(|| CliError::Other("sweep runs need a ground truth".into()))?;
        let two = e.reconstruction_two_line.unwrap_or(ResolvedRecord {
            resolved: false,
            dip_contrast: f64::NAN,
        });
        rows.push(SnrRow {
            snr,
            psnr: m.psnr,
            ssim: m.ssim,
            nrmse: m.nrmse,
            resolved: two.resolved,
            dip: two.dip_contrast,
        });
    }
    write_table(&cfg.out.join("snr_sweep.csv"), &rows)?;
    Ok(rows)
}

pub fn cmd_resolution_sweep(cfg: &RunConfig, separations: &[f64], ov: &ReconOverrides) -> CliResult<Vec<SeparationRow>> {
    if separations.is_empty() {
        return Err(CliError::Config("separation list is empty".into()));
    }
    cfg.validate()?;
    let o = optics(cfg)?;
    let mut rows = Vec::new();
    for &s in separations {
        let mut c = cfg.clone();
        c.phantom.kind = PhantomKind::TwoLine;
        c.phantom.separation_fraction = s;
        c.out = cfg.out.join(format!("sep_{}", label(s)));
        let (_, e) = full_run(&c, ov)?;
        let none = ResolvedRecord {
            resolved: false,
            dip_contrast: f64::NAN,
        };
        let wf = e.widefield_two_line.unwrap_or(none.clone());
        let rc = e.reconstruction_two_line.unwrap_or(none);
        rows.push(SeparationRow {
            separation_fraction: s,
            separation_nm: s * o.d_abbe(),
            widefield_resolved: wf.resolved,
            widefield_dip: wf.dip_contrast,
            resolved: rc.resolved,
            dip: rc.dip_contrast,
        });
    }
    write_table(&cfg.out.join("resolution_sweep.csv"), &rows)?;
    Ok(rows)
}

/// Normalised sub-frames of a run, for callers that drive [`Reconstruction`] directly.
pub fn load_measured(dir: &Path) -> CliResult<ImageStack> {
    Ok(normalize_unit(&load_raster(require(dir, SUBFRAMES, "")?)?)?)
}

/// Default reconstruction settings with the run seed applied.
pub fn recon_for(cfg: &RunConfig) -> ReconConfig {
    cfg.effective_recon()
}
