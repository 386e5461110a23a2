//! Per-acquisition optimisation of an untrained U-Net against the physics loss.

mod artifacts;

pub use artifacts::{write_loss_trace, ArtifactWriter};

use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamState, FixedKernel, Graph, NodeId, Scalar, SsimParams, Tensor};
use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::imgcore::{upsample_bilinear, ImageStack, Raster, Seed};
use crate::network::{build_unet_into, init_params, stack_to_tensor, Checkpoint, UNetConfig};

pub const LR_RANGE: [f64; 2] = [1e-4, 1e-3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ssim,
    Mse,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssim" => Ok(Self::Ssim),
            "mse" => Ok(Self::Mse),
            _ => Err(Error::invalid(format!("unknown loss `{s}` (valid: ssim, mse)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    TotalVariation,
}

impl FromStr for Regularizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "total_variation" | "tv" => Ok(Self::TotalVariation),
            _ => Err(Error::invalid(format!(
                "unknown regularizer `{s}` (valid: none, total_variation)"
            ))),
        }
    }
}

/// Optimisation settings for one reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub lr: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub alpha: f64,
    pub regularizer: Regularizer,
    /// Progress and `epoch_<k>` image interval; 0 disables.
    pub log_every: usize,
    /// Resumable checkpoint interval; 0 disables.
    pub checkpoint_every: usize,
    pub deterministic: bool,
    /// Stop when the moving-average loss stops improving.
    pub early_stop: bool,
    pub early_stop_window: usize,
    pub early_stop_tolerance: f64,
    /// Fresh weight draws allowed when every output pixel goes dead.
    pub max_restarts: usize,
    pub depth: usize,
    pub base_width: usize,
    pub ssim: SsimParams,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay_rate: 0.9,
            decay_every: 50,
            epochs: 1000,
            seed: 0,
            loss: LossKind::Ssim,
            alpha: 0.0,
            regularizer: Regularizer::None,
            log_every: 100,
            checkpoint_every: 0,
            deterministic: true,
            early_stop: false,
            early_stop_window: 50,
            early_stop_tolerance: 1e-5,
            max_restarts: 3,
            depth: 3,
            base_width: 32,
            ssim: SsimParams::default(),
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= LR_RANGE[0] && self.lr <= LR_RANGE[1]) {
            return Err(Error::invalid(format!(
                "lr {} outside [{}, {}]",
                self.lr, LR_RANGE[0], LR_RANGE[1]
            )));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::invalid(format!("decay_rate {} not in (0, 1]", self.decay_rate)));
        }
        if self.decay_every == 0 {
            return Err(Error::invalid("decay_every must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.early_stop && self.early_stop_window == 0 {
            return Err(Error::invalid("early_stop_window must be >= 1"));
        }
        self.ssim.validate()?;
        self.network(1).validate()
    }

    pub fn network(&self, in_channels: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            depth: self.depth,
            base_width: self.base_width,
            convs_per_level: 2,
        }
    }

    fn effective_alpha(&self) -> f64 {
        match self.regularizer {
            Regularizer::None => 0.0,
            Regularizer::TotalVariation => self.alpha,
        }
    }
}

/// Learning rate used at `epoch` (0-based).
pub fn lr_schedule(epoch: usize, config: &ReconConfig) -> f64 {
    config.lr * config.decay_rate.powi((epoch / config.decay_every) as i32)
}

/// Loss nodes appended to a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub loss: NodeId,
    /// Simulated sub-frames `(1, n, h, w)`.
    pub simulated: NodeId,
    pub data_term: NodeId,
    pub total_variation: Option<NodeId>,
}

fn transfer_of<T: Scalar>(model: &ForwardModel) -> Result<Arc<FixedKernel<T>>> {
    let grid = model.spec().optics.grid;
    let t = model
        .convolver()
        .transfer()
        .iter()
        .map(|c| Complex::new(T::of(c.re), T::of(c.im)))
        .collect();
    Ok(Arc::new(FixedKernel::new(grid.width, grid.height, t)?))
}

/// Appends `data_term(H(estimate), measured) + alpha·TV(estimate)`.
/// `estimate` is `(1, 1, H, W)` on the object grid, `measured` is `(1, n, h, w)`.
pub fn append_physics_loss<T: Scalar>(
    g: &mut Graph<T>,
    estimate: NodeId,
    measured: NodeId,
    model: &ForwardModel,
    config: &ReconConfig,
) -> Result<LossNodes> {
    let spec = model.spec();
    let n = spec.frames();
    let grid = spec.optics.grid;
    let sub = spec.subframe_grid();
    if g.shape(estimate) != [1, 1, grid.height, grid.width] {
        return Err(Error::shape(format!(
            "estimate {:?} is not on the {}x{} object grid",
            g.shape(estimate),
            grid.width,
            grid.height
        )));
    }
    let ms = g.shape(measured);
    if ms[1] != n {
        return Err(Error::shape(format!(
            "measured stack has {} frames, acquisition has {n} patterns",
            ms[1]
        )));
    }
    if ms != [1, n, sub.height, sub.width] {
        return Err(Error::shape(format!(
            "measured stack {ms:?} does not match the {}x{} sub-frame grid",
            sub.width, sub.height
        )));
    }
    let pat = g.constant(stack_to_tensor(&spec.patterns.stack));
    g.set_name(pat, "patterns");
    let lit = g.mul(estimate, pat)?;
    let blurred = g.fft_conv(lit, transfer_of(model)?)?;
    let simulated = g.bin_mean(blurred, spec.downsample)?;
    g.set_name(simulated, "simulated");
    let data_term = match config.loss {
        LossKind::Ssim => {
            let s = g.ssim(simulated, measured, config.ssim)?;
            g.affine(s, -T::one(), T::one())
        }
        LossKind::Mse => g.mse(simulated, measured)?,
    };
    let alpha = config.effective_alpha();
    let (loss, total_variation) = if alpha > 0.0 {
        let tv = g.total_variation(estimate);
        let weighted = g.affine(tv, T::of(alpha), T::zero());
        (g.add(data_term, weighted)?, Some(tv))
    } else {
        (data_term, None)
    };
    Ok(LossNodes {
        loss,
        simulated,
        data_term,
        total_variation,
    })
}

fn check_measured(measured: &ImageStack, model: &ForwardModel) -> Result<()> {
    let spec = model.spec();
    if measured.len() != spec.frames() {
        return Err(Error::shape(format!(
            "measured stack has {} frames, acquisition has {} patterns",
            measured.len(),
            spec.frames()
        )));
    }
    if measured.grid.width != spec.subframe_grid().width || measured.grid.height != spec.subframe_grid().height {
        return Err(Error::shape(format!(
            "measured frames are {}x{}, sub-frame grid is {}x{}",
            measured.grid.width,
            measured.grid.height,
            spec.subframe_grid().width,
            spec.subframe_grid().height
        )));
    }
    if !measured.is_finite() {
        return Err(Error::NonFinite("measured stack".into()));
    }
    Ok(())
}

/// Physics loss of a fixed estimate, evaluated in double precision.
pub fn physics_loss(
    estimate: &Raster,
    measured: &ImageStack,
    model: &ForwardModel,
    config: &ReconConfig,
) -> Result<f64> {
    check_measured(measured, model)?;
    let grid = model.spec().optics.grid;
    if estimate.grid != grid {
        return Err(Error::shape("estimate is not on the acquisition grid"));
    }
    let mut g = Graph::<f64>::new();
    let x = g.input([1, 1, grid.height, grid.width]);
    let m = g.input([1, measured.len(), measured.grid.height, measured.grid.width]);
    let nodes = append_physics_loss(&mut g, x, m, model, config)?;
    let e = g.evaluate(
        &[stack_to_tensor(&estimate.clone().into_stack()), stack_to_tensor(measured)],
        &[],
    )?;
    Ok(e.value(nodes.loss).item())
}

/// Measured stack upsampled to the object grid, one channel per frame.
pub fn network_input(measured: &ImageStack, factor: usize) -> Result<ImageStack> {
    let frames = measured
        .rasters()
        .map(|r| upsample_bilinear(&r, factor))
        .collect::<Result<Vec<_>>>()?;
    ImageStack::from_rasters(frames)
}

/// Per-epoch trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Wall time since the run started, at the end of each epoch.
    pub seconds: Vec<f64>,
    pub final_loss: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Epochs at which the weights were redrawn after the output died.
    #[serde(default)]
    pub restarts: Vec<usize>,
}

impl LossReport {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }
}

/// Progress notification passed to observers.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeState {
    report: LossReport,
    seconds_offset: f64,
}

/// Weight-init seed for the `k`-th draw; draw 0 is the run seed itself.
fn weight_seed(seed: u64, k: u64) -> Seed {
    if k == 0 {
        Seed(seed)
    } else {
        Seed(Seed(seed).derive("restart", k))
    }
}

/// A resumable reconstruction of one acquisition.
pub struct Reconstruction {
    config: ReconConfig,
    net: UNetConfig,
    graph: Graph<f32>,
    output: NodeId,
    loss: NodeId,
    inputs: Vec<Tensor<f32>>,
    params: Vec<Tensor<f32>>,
    adam: AdamState<f32>,
    epoch: usize,
    report: LossReport,
    best_params: Vec<Tensor<f32>>,
    best_estimate: Option<Raster>,
    object_grid: crate::imgcore::GridSpec,
    started: Instant,
    seconds_offset: f64,
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct ReconOutput {
    /// Network output after the last update.
    pub estimate: Raster,
    /// Network output at the lowest recorded loss.
    pub best_estimate: Raster,
    pub report: LossReport,
    pub best_checkpoint: Checkpoint,
    pub final_checkpoint: Checkpoint,
}

impl Reconstruction {
    /// Builds the network and loss for `measured` (normalised to [0, 1]).
    pub fn new(measured: &ImageStack, model: &ForwardModel, config: &ReconConfig) -> Result<Self> {
        config.validate()?;
        check_measured(measured, model)?;
        if measured.min() < -1e-3 || measured.max() > 1.0 + 1e-3 {
            return Err(Error::invalid(format!(
                "measured stack must be normalised to [0, 1], range is [{}, {}]",
                measured.min(),
                measured.max()
            )));
        }
        let spec = model.spec();
        let grid = spec.optics.grid;
        let n = spec.frames();
        let net = config.network(n);
        net.check_input_size(grid.height, grid.width)?;

        let mut graph = Graph::<f32>::new();
        let x = graph.input([1, n, grid.height, grid.width]);
        let output = build_unet_into(&mut graph, x, &net)?;
        graph.set_name(output, "estimate");
        let m = graph.input([1, n, measured.grid.height, measured.grid.width]);
        let nodes = append_physics_loss(&mut graph, output, m, model, config)?;

        let input = network_input(measured, spec.downsample)?;
        let params = init_params::<f32>(graph.params(), weight_seed(config.seed, 0));
        let adam = AdamState::new(graph.params());
        Ok(Self {
            config: config.clone(),
            net,
            output,
            loss: nodes.loss,
            inputs: vec![stack_to_tensor(&input), stack_to_tensor(measured)],
            best_params: params.clone(),
            params,
            adam,
            graph,
            epoch: 0,
            report: LossReport {
                best_loss: f64::INFINITY,
                ..LossReport::default()
            },
            best_estimate: None,
            object_grid: grid,
            started: Instant::now(),
            seconds_offset: 0.0,
        })
    }

    /// Continues from a checkpoint written by [`Reconstruction::checkpoint`].
    /// Without `best`, best-loss tracking restarts at the resume epoch.
    pub fn resume(
        measured: &ImageStack,
        model: &ForwardModel,
        config: &ReconConfig,
        ck: &Checkpoint,
        best: Option<&Checkpoint>,
    ) -> Result<Self> {
        let mut r = Self::new(measured, model, config)?;
        if ck.config != r.net || ck.specs != r.graph.params() {
            return Err(Error::shape("checkpoint does not match the network layout"));
        }
        let adam = ck
            .adam
            .clone()
            .ok_or_else(|| Error::invalid("checkpoint has no optimiser state"))?;
        let state: ResumeState = serde_json::from_value(ck.extra.clone())
            .map_err(|e| Error::invalid(format!("checkpoint has no resume state: {e}")))?;
        r.params = ck.params.clone();
        r.adam = adam;
        r.epoch = ck.epoch;
        r.report = state.report;
        r.seconds_offset = state.seconds_offset;
        match best {
            Some(b) if b.specs == ck.specs => r.best_params = b.params.clone(),
            Some(_) => return Err(Error::shape("best checkpoint does not match the network layout")),
            None => {
                r.best_params = r.params.clone();
                r.report.best_loss = f64::INFINITY;
                r.report.best_epoch = ck.epoch;
            }
        }
        Ok(r)
    }

    pub fn config(&self) -> &ReconConfig {
        &self.config
    }

    pub fn network_config(&self) -> &UNetConfig {
        &self.net
    }

    pub fn graph(&self) -> &Graph<f32> {
        &self.graph
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    /// Number of epochs completed.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn report(&self) -> &LossReport {
        &self.report
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs || self.report.stopped_early
    }

    fn elapsed(&self) -> f64 {
        self.seconds_offset + self.started.elapsed().as_secs_f64()
    }

    fn to_raster(&self, t: &Tensor<f32>) -> Raster {
        Raster::new(self.object_grid, t.data.clone()).expect("output matches the object grid")
    }

    /// Loss and parameter gradients at the current parameters.
    pub fn loss_and_gradients(&self) -> Result<(f64, Vec<Tensor<f32>>)> {
        let e = self.graph.evaluate(&self.inputs, &self.params)?;
        let loss = e.value(self.loss).item().as_f64();
        Ok((loss, self.graph.backward(&e, self.loss)?))
    }

    /// Current network output.
    pub fn estimate(&self) -> Result<Raster> {
        self.estimate_with(&self.params)
    }

    fn estimate_with(&self, params: &[Tensor<f32>]) -> Result<Raster> {
        let e = self.graph.evaluate(&self.inputs, params)?;
        Ok(self.to_raster(e.value(self.output)))
    }

    /// One forward, backward and Adam update.
    pub fn step(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let e = self.graph.evaluate(&self.inputs, &self.params)?;
        let loss = e.value(self.loss).item().as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        if loss < self.report.best_loss {
            self.report.best_loss = loss;
            self.report.best_epoch = epoch;
            self.best_params.clone_from(&self.params);
            self.best_estimate = Some(self.to_raster(e.value(self.output)));
        }
        let grads = self.graph.backward(&e, self.loss)?;
        let dead = e.value(self.output).data.iter().all(|&v| v == 0.0)
            && grads.iter().all(|g| g.data.iter().all(|&v| v == 0.0));
        drop(e);
        let lr = lr_schedule(epoch, &self.config);
        if dead && self.report.restarts.len() < self.config.max_restarts {
            // relu everywhere negative: no gradient can bring it back
            self.report.restarts.push(epoch);
            let k = self.report.restarts.len() as u64;
            self.params = init_params(self.graph.params(), weight_seed(self.config.seed, k));
            self.adam = AdamState::new(self.graph.params());
        } else {
            self.adam.step(&mut self.params, &grads, lr)?;
        }
        self.epoch += 1;
        let seconds = self.elapsed();
        self.report.losses.push(loss);
        self.report.lrs.push(lr);
        self.report.seconds.push(seconds);
        self.report.final_loss = loss;
        if self.config.early_stop && self.plateaued() {
            self.report.stopped_early = true;
        }
        Ok(EpochRecord {
            epoch,
            loss,
            lr,
            seconds,
        })
    }

    fn plateaued(&self) -> bool {
        let w = self.config.early_stop_window;
        let l = &self.report.losses;
        if l.len() < 2 * w {
            return false;
        }
        let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let recent = avg(&l[l.len() - w..]);
        let before = avg(&l[l.len() - 2 * w..l.len() - w]);
        before - recent < self.config.early_stop_tolerance
    }

    /// Resumable snapshot of the current state.
    pub fn checkpoint(&self) -> Checkpoint {
        self.snapshot(self.params.clone(), self.epoch, Some(self.adam.clone()))
    }

    fn snapshot(&self, params: Vec<Tensor<f32>>, epoch: usize, adam: Option<AdamState<f32>>) -> Checkpoint {
        let extra = serde_json::to_value(ResumeState {
            report: self.report.clone(),
            seconds_offset: self.elapsed(),
        })
        .expect("report serialises");
        Checkpoint {
            epoch,
            config: self.net.clone(),
            specs: self.graph.params().to_vec(),
            params,
            adam,
            extra,
        }
    }

    /// Weights at the lowest recorded loss.
    pub fn best_checkpoint(&self) -> Checkpoint {
        self.snapshot(self.best_params.clone(), self.report.best_epoch, None)
    }

    /// Runs the remaining epochs, calling `observer` after each one.
    pub fn run_with(
        &mut self,
        mut observer: impl FnMut(&Reconstruction, &EpochRecord) -> Result<()>,
    ) -> Result<ReconOutput> {
        while !self.is_finished() {
            let rec = self.step()?;
            observer(self, &rec)?;
        }
        self.finish()
    }

    pub fn run(&mut self) -> Result<ReconOutput> {
        self.run_with(|_, _| Ok(()))
    }

    fn finish(&mut self) -> Result<ReconOutput> {
        let estimate = self.estimate()?;
        if !estimate.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: self.epoch });
        }
        let best_estimate = match &self.best_estimate {
            Some(b) => b.clone(),
            None => self.estimate_with(&self.best_params)?,
        };
        Ok(ReconOutput {
            estimate,
            best_estimate,
            report: self.report.clone(),
            best_checkpoint: self.best_checkpoint(),
            final_checkpoint: self.checkpoint(),
        })
    }
}

/// Builds, runs and returns a reconstruction in one call.
pub fn reconstruct(measured: &ImageStack, model: &ForwardModel, config: &ReconConfig) -> Result<ReconOutput> {
    Reconstruction::new(measured, model, config)?.run()
}

#[cfg(test)]
mod tests;
