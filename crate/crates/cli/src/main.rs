use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pinn_sim_cli::config::RunConfig;
use pinn_sim_cli::pipeline::{self, ReconOverrides};
use pinn_sim_cli::CliResult;

/// Structured illumination reconstruction with an untrained physics-informed U-Net.
#[derive(Parser, Debug)]
#[command(name = "pinn-sim", version)]
struct Cli {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    deterministic: bool,
    /// Cap reconstructions at 400 epochs.
    #[arg(long, global = true)]
    quick: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an illumination pattern stack with PGM previews.
    Patterns {
        #[arg(long)]
        modality: Option<String>,
    },
    /// Simulate sub-frames, widefield and ground truth into the run directory.
    Simulate {
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long)]
        modality: Option<String>,
    },
    /// Optimise the network against the sub-frames of a simulated run.
    Reconstruct {
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from checkpoint_last.
        #[arg(long)]
        resume: bool,
    },
    /// Score a reconstruction and write metrics.json.
    Evaluate,
    /// Simulate, reconstruct and evaluate over a list of SNRs.
    SnrSweep {
        #[arg(long, value_delimiter = ',')]
        snrs: Option<Vec<f64>>,
    },
    /// Same over two-line separations given as fractions of the Abbe limit.
    ResolutionSweep {
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        separations: Option<Vec<f64>>,
    },
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match (&cli.config, &cli.command, &cli.out) {
        (Some(p), _, _) => RunConfig::load(p)?,
        // later stages default to the configuration stored with the run
        (None, Command::Reconstruct { .. } | Command::Evaluate, Some(out)) if out.join(pipeline::MANIFEST).exists() => {
            RunConfig::load(&out.join(pipeline::MANIFEST))?
        }
        _ => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if cli.quick {
        cfg.quick = true;
    }
    match &cli.command {
        Command::Patterns { modality } | Command::Simulate { modality, .. } => {
            if let Some(m) = modality {
                cfg.patterns.modality = m.clone();
            }
        }
        _ => {}
    }
    if let Command::Simulate { snr: Some(s), .. } = &cli.command {
        cfg.acquisition.snr = Some(*s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve(&cli)?;
    let ov = ReconOverrides {
        verbose: true,
        ..ReconOverrides::default()
    };
    match &cli.command {
        Command::Patterns { .. } => {
            let set = pipeline::cmd_patterns(&cfg)?;
            println!("wrote {} {} patterns to {}", set.len(), set.modality, cfg.out.display());
        }
        Command::Simulate { .. } => {
            let n = pipeline::cmd_simulate(&cfg)?;
            println!(
                "simulated into {} (snr {:?}, sub-frame sigma {:.4e})",
                cfg.out.display(),
                n.snr,
                n.subframe_sigma
            );
        }
        Command::Reconstruct { lr, epochs, resume } => {
            let ov = ReconOverrides {
                lr: *lr,
                epochs: *epochs,
                resume: *resume,
                ..ov
            };
            let out = pipeline::cmd_reconstruct(&cfg, &cfg.out, &ov)?;
            println!(
                "reconstructed {} epochs, loss {:.6} -> {:.6}",
                out.report.len(),
                out.report.losses.first().copied().unwrap_or(f64::NAN),
                out.report.final_loss
            );
        }
        Command::Evaluate => {
            let e = pipeline::cmd_evaluate(&cfg.out)?;
            println!("{}", serde_json::to_string_pretty(&e).expect("serialise"));
        }
        Command::SnrSweep { snrs } => {
            let list = snrs.clone().unwrap_or_else(|| cfg.sweep.snrs.clone());
            let rows = pipeline::cmd_snr_sweep(&cfg, &list, &ov)?;
            println!("{} rows written to {}", rows.len(), cfg.out.join("snr_sweep.csv").display());
        }
        Command::ResolutionSweep { separations } => {
            let list = separations.clone().unwrap_or_else(|| cfg.sweep.separations.clone());
            let rows = pipeline::cmd_resolution_sweep(&cfg, &list, &ov)?;
            println!("{} rows written to {}", rows.len(), cfg.out.join("resolution_sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
