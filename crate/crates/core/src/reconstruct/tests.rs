use super::*;
use crate::forward::{gen_two_line_phantom, AcquisitionSpec, Orientation};
use crate::imgcore::{normalize_unit, GridSpec};
use crate::network::{load_checkpoint, save_checkpoint};
use crate::optics::OpticalModel;
use crate::patterns::{
    default_lpsim_fwhm, default_lpsim_shifts, default_nlsim_k0, gen_linear_sim, gen_lpsim_proxy, gen_nlsim,
    linear_angles, linear_phases, nlsim_angles, nlsim_phases, PatternSet, LPSIM_DEFAULT_PITCH_NM,
    NLSIM_DEFAULT_AMPS,
};
use rand::Rng;

fn optics(side: usize) -> OpticalModel {
    OpticalModel::new(1.4, 525.0, GridSpec::square(side, 20.0).unwrap()).unwrap()
}

fn linear(o: &OpticalModel) -> PatternSet {
    gen_linear_sim(o.grid, 0.9 * o.f_det(), 1.0, &linear_angles(), &linear_phases()).unwrap()
}

fn model_for(o: OpticalModel, p: PatternSet) -> ForwardModel {
    ForwardModel::new(AcquisitionSpec::new(o, p, 2, Some(20.0), Seed(3)).unwrap()).unwrap()
}

fn object(grid: GridSpec) -> Raster {
    gen_two_line_phantom(grid, 160.0, 2.0, Orientation::Vertical).unwrap().image
}

fn tiny() -> ReconConfig {
    ReconConfig {
        epochs: 12,
        depth: 2,
        base_width: 4,
        seed: 11,
        ..ReconConfig::default()
    }
}

fn tiny_problem() -> (ForwardModel, ImageStack) {
    let o = optics(32);
    let model = model_for(o, linear(&o));
    let g = normalize_unit(&model.forward_stack(&object(o.grid)).unwrap()).unwrap();
    (model, g)
}

#[test]
fn schedule_values() {
    let c = ReconConfig::default();
    assert_eq!(lr_schedule(0, &c), 1e-3);
    assert_eq!(lr_schedule(49, &c), 1e-3);
    assert!((lr_schedule(50, &c) - 9e-4).abs() < 1e-18);
    assert!((lr_schedule(500, &c) - 1e-3 * 0.9f64.powi(10)).abs() < 1e-15);
    assert!((lr_schedule(500, &c) - 3.487e-4).abs() < 1e-7);
}

#[test]
fn config_validation() {
    assert!(ReconConfig::default().validate().is_ok());
    for bad in [
        ReconConfig { lr: 0.0, ..tiny() },
        ReconConfig { lr: 5e-3, ..tiny() },
        ReconConfig { epochs: 0, ..tiny() },
        ReconConfig { alpha: -1.0, ..tiny() },
        ReconConfig { decay_every: 0, ..tiny() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    let parsed: std::result::Result<ReconConfig, _> = serde_json::from_str(r#"{"lrr": 1e-3}"#);
    assert!(parsed.is_err());
    assert_eq!("tv".parse::<Regularizer>().unwrap(), Regularizer::TotalVariation);
    assert!("l1".parse::<LossKind>().is_err());
}

#[test]
fn perfect_model_is_a_fixed_point() {
    let o = optics(64);
    let patterns = [
        linear(&o),
        gen_nlsim(o.grid, default_nlsim_k0(&o), &NLSIM_DEFAULT_AMPS, &nlsim_angles(), &nlsim_phases()).unwrap(),
        gen_lpsim_proxy(
            o.grid,
            LPSIM_DEFAULT_PITCH_NM,
            default_lpsim_fwhm(&o),
            &default_lpsim_shifts(LPSIM_DEFAULT_PITCH_NM),
        )
        .unwrap(),
    ];
    let obj = object(o.grid);
    for p in patterns {
        let model = model_for(o, p);
        let g = model.noiseless_stack(&obj).unwrap();
        let loss = physics_loss(&obj, &g, &model, &ReconConfig::default()).unwrap();
        assert!(loss.abs() < 1e-6, "{:?}: {loss}", model.spec().patterns.modality);
        let mse = physics_loss(&obj, &g, &model, &ReconConfig { loss: LossKind::Mse, ..tiny() }).unwrap();
        assert!(mse < 1e-12);
    }
}

#[test]
fn tv_term_adds_exactly() {
    let (model, g) = tiny_problem();
    let mut rng = Seed(4).rng("noisy", 0);
    let est = Raster::from_fn(model.spec().optics.grid, |_, _| rng.random::<f32>());
    let base = physics_loss(&est, &g, &model, &tiny()).unwrap();
    let cfg = ReconConfig {
        alpha: 0.1,
        regularizer: Regularizer::TotalVariation,
        ..tiny()
    };
    let with = physics_loss(&est, &g, &model, &cfg).unwrap();
    // independent anisotropic TV: mean absolute forward difference per sample
    let (w, h) = (est.width(), est.height());
    let mut tv = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                tv += (est.get(x + 1, y) as f64 - est.get(x, y) as f64).abs();
            }
            if y + 1 < h {
                tv += (est.get(x, y + 1) as f64 - est.get(x, y) as f64).abs();
            }
        }
    }
    tv /= (w * h) as f64;
    assert!((with - base - 0.1 * tv).abs() < 1e-12, "{} vs {}", with - base, 0.1 * tv);
    // alpha without the regularizer selected has no effect
    let ignored = physics_loss(&est, &g, &model, &ReconConfig { alpha: 0.1, ..tiny() }).unwrap();
    assert_eq!(ignored, base);
}

#[test]
fn self_ssim_term_is_zero() {
    let (model, _) = tiny_problem();
    let mut rng = Seed(8).rng("x", 0);
    let est = Raster::from_fn(model.spec().optics.grid, |_, _| rng.random::<f32>());
    let own = model.noiseless_stack(&est).unwrap();
    assert!(physics_loss(&est, &own, &model, &tiny()).unwrap().abs() < 1e-9);
}

#[test]
fn frame_mismatch_rejected() {
    let (model, g) = tiny_problem();
    let short = ImageStack::new(g.grid, g.frames[..8].to_vec()).unwrap();
    assert!(Reconstruction::new(&short, &model, &tiny()).is_err());
    let est = object(model.spec().optics.grid);
    assert!(physics_loss(&est, &short, &model, &tiny()).is_err());
    let unnormalised = g.scaled(3.0);
    assert!(Reconstruction::new(&unnormalised, &model, &tiny()).is_err());
}

#[test]
fn every_parameter_receives_gradient() {
    let (model, g) = tiny_problem();
    let r = Reconstruction::new(&g, &model, &tiny()).unwrap();
    let (loss, grads) = r.loss_and_gradients().unwrap();
    assert!((0.0..=2.0).contains(&loss));
    for (spec, gr) in r.graph().params().iter().zip(&grads) {
        assert!(gr.data.iter().any(|&v| v != 0.0), "{} has an all-zero gradient", spec.name);
    }
}

#[test]
fn run_is_deterministic_and_improves() {
    let (model, g) = tiny_problem();
    let cfg = ReconConfig { epochs: 30, ..tiny() };
    let a = reconstruct(&g, &model, &cfg).unwrap();
    let b = reconstruct(&g, &model, &cfg).unwrap();
    assert!(a.estimate.data.iter().zip(&b.estimate.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.report.losses, b.report.losses);
    let r = &a.report;
    assert_eq!(r.len(), 30);
    assert!(r.final_loss <= r.losses[0]);
    assert!(r.losses.iter().all(|l| (0.0..=2.0).contains(l)));
    for (e, lr) in r.lrs.iter().enumerate() {
        assert_eq!(*lr, lr_schedule(e, &cfg));
    }
    assert_eq!(r.best_loss, r.losses[r.best_epoch]);
    assert!(r.losses.iter().all(|&l| l >= r.best_loss));
    assert!(a.estimate.min() >= 0.0);
}

#[test]
fn resume_continues_the_same_trajectory() {
    let (model, g) = tiny_problem();
    let cfg = ReconConfig { epochs: 22, ..tiny() };
    let straight = reconstruct(&g, &model, &cfg).unwrap();

    let mut first = Reconstruction::new(&g, &model, &cfg).unwrap();
    for _ in 0..10 {
        first.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&first.checkpoint(), dir.path().join("ck")).unwrap();
    save_checkpoint(&first.best_checkpoint(), dir.path().join("best")).unwrap();
    let ck = load_checkpoint(dir.path().join("ck")).unwrap();
    let best = load_checkpoint(dir.path().join("best")).unwrap();
    let mut resumed = Reconstruction::resume(&g, &model, &cfg, &ck, Some(&best)).unwrap();
    assert_eq!(resumed.epoch(), 10);
    let out = resumed.run().unwrap();
    assert_eq!(out.report.losses, straight.report.losses);
    assert_eq!(out.report.best_epoch, straight.report.best_epoch);
    for (p, q) in out.final_checkpoint.params.iter().zip(&straight.final_checkpoint.params) {
        assert!(p.data.iter().zip(&q.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert!(out.estimate.data.iter().zip(&straight.estimate.data).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn non_finite_loss_aborts_and_dumps() {
    let (model, g) = tiny_problem();
    let mut r = Reconstruction::new(&g, &model, &tiny()).unwrap();
    r.step().unwrap();
    r.params_mut()[0].data[0] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let writer = ArtifactWriter::new(dir.path()).unwrap();
    match writer.run(&mut r) {
        Err(Error::NonFiniteLoss { epoch }) => assert_eq!(epoch, 1),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
    let ck = load_checkpoint(dir.path().join("checkpoint_last")).unwrap();
    assert_eq!(ck.epoch, 1);
    assert!(dir.path().join("loss_trace.csv").exists());
}

#[test]
fn artifacts_written() {
    let (model, g) = tiny_problem();
    let cfg = ReconConfig {
        epochs: 6,
        log_every: 3,
        checkpoint_every: 3,
        ..tiny()
    };
    let dir = tempfile::tempdir().unwrap();
    let writer = ArtifactWriter::new(dir.path()).unwrap();
    let mut r = Reconstruction::new(&g, &model, &cfg).unwrap();
    writer.run(&mut r).unwrap();
    for f in [
        "reconstruction.json",
        "reconstruction.f32",
        "loss_trace.csv",
        "epoch_3.f32",
        "epoch_6.json",
        "checkpoint_best.json",
        "checkpoint_best.f32",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let trace = std::fs::read_to_string(dir.path().join("loss_trace.csv")).unwrap();
    let lines: Vec<_> = trace.lines().collect();
    assert_eq!(lines[0], "epoch,loss,lr,seconds");
    assert_eq!(lines.len(), 7);
}

#[test]
fn early_stop_on_plateau() {
    let (model, g) = tiny_problem();
    let cfg = ReconConfig {
        epochs: 40,
        early_stop: true,
        early_stop_window: 3,
        early_stop_tolerance: 10.0,
        ..tiny()
    };
    let out = reconstruct(&g, &model, &cfg).unwrap();
    assert!(out.report.stopped_early);
    assert_eq!(out.report.len(), 6);
}

fn kill_output(r: &mut Reconstruction) {
    let i = r.graph().params().iter().position(|p| p.name == "final.bias").unwrap();
    r.params_mut()[i].data[0] = -1e3;
}

#[test]
fn dead_output_redraws_weights() {
    let (model, g) = tiny_problem();
    let mut r = Reconstruction::new(&g, &model, &tiny()).unwrap();
    kill_output(&mut r);
    assert!(r.estimate().unwrap().data.iter().all(|&v| v == 0.0));
    let first = r.step().unwrap();
    assert_eq!(r.report().restarts, vec![0]);
    assert_eq!(first.lr, tiny().lr);
    assert!(r.estimate().unwrap().data.iter().any(|&v| v > 0.0));
    let again = Reconstruction::new(&g, &model, &tiny()).unwrap();
    assert_ne!(r.params(), again.params());
    let out = r.run().unwrap();
    assert_eq!(out.report.len(), tiny().epochs);
    assert!(out.report.final_loss < first.loss);

    // same draw every time
    let mut twin = Reconstruction::new(&g, &model, &tiny()).unwrap();
    kill_output(&mut twin);
    assert_eq!(twin.run().unwrap().report.losses, out.report.losses);

    let mut stuck = Reconstruction::new(&g, &model, &ReconConfig { max_restarts: 0, ..tiny() }).unwrap();
    kill_output(&mut stuck);
    let out = stuck.run().unwrap();
    assert!(out.report.restarts.is_empty());
    assert!(out.estimate.data.iter().all(|&v| v == 0.0));
}
