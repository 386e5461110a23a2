use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{EpochRecord, LossReport, ReconOutput, Reconstruction};
use crate::error::{Error, Result};
use crate::imgcore::{save_raster, Raster};
use crate::network::save_checkpoint;

/// `epoch,loss,lr,seconds` with a header row.
pub fn write_loss_trace(report: &LossReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("epoch,loss,lr,seconds\n");
    for (i, ((l, lr), t)) in report.losses.iter().zip(&report.lrs).zip(&report.seconds).enumerate() {
        writeln!(s, "{i},{l:.9e},{lr:.9e},{t:.3}").expect("string write");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes the per-run files of a reconstruction into one directory.
#[derive(Debug, Clone)]
pub struct ArtifactWriter {
    pub dir: PathBuf,
    /// Print progress lines to stderr.
    pub verbose: bool,
}

impl ArtifactWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, verbose: false })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn image(&self, name: &str, r: &Raster) -> Result<()> {
        save_raster(&r.clone().into_stack(), self.path(name))
    }

    /// Per-epoch hook: progress, `epoch_<k>` dumps and periodic checkpoints.
    pub fn observe(&self, r: &Reconstruction, rec: &EpochRecord) -> Result<()> {
        let done = rec.epoch + 1;
        let cfg = r.config();
        if cfg.log_every > 0 && done % cfg.log_every == 0 {
            if self.verbose {
                eprintln!(
                    "epoch {done:>5}  loss {:.6}  lr {:.3e}  {:.1}s",
                    rec.loss, rec.lr, rec.seconds
                );
            }
            self.image(&format!("epoch_{done}"), &r.estimate()?)?;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_checkpoint(&r.checkpoint(), self.path("checkpoint_last"))?;
            save_checkpoint(&r.best_checkpoint(), self.path("checkpoint_best"))?;
        }
        Ok(())
    }

    /// Dumps the last good state after a failed run.
    pub fn dump_failure(&self, r: &Reconstruction) -> Result<()> {
        save_checkpoint(&r.checkpoint(), self.path("checkpoint_last"))?;
        save_checkpoint(&r.best_checkpoint(), self.path("checkpoint_best"))?;
        write_loss_trace(r.report(), self.path("loss_trace.csv"))
    }

    /// `reconstruction`, `reconstruction_best`, `loss_trace.csv` and both checkpoints.
    pub fn write_output(&self, out: &ReconOutput) -> Result<()> {
        self.image("reconstruction", &out.estimate)?;
        self.image("reconstruction_best", &out.best_estimate)?;
        write_loss_trace(&out.report, self.path("loss_trace.csv"))?;
        save_checkpoint(&out.best_checkpoint, self.path("checkpoint_best"))?;
        save_checkpoint(&out.final_checkpoint, self.path("checkpoint_last"))
    }

    /// Runs `r` to completion, writing artifacts as it goes. On a
    /// non-finite loss the last good state is dumped before the error returns.
    pub fn run(&self, r: &mut Reconstruction) -> Result<ReconOutput> {
        match r.run_with(|r, rec| self.observe(r, rec)) {
            Ok(out) => {
                self.write_output(&out)?;
                Ok(out)
            }
            Err(e @ Error::NonFiniteLoss { .. }) | Err(e @ Error::NonFinite(_)) => {
                self.dump_failure(r)?;
                Err(e)
            }
            Err(e) => Err(e),
        }
    }
}
