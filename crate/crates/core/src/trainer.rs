//! The two-phase procedure: train until the test error reaches a target,
//! then keep training with end-of-epoch thresholding until the error rises
//! above the target again, rolling back to the last acceptable epoch.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, chunks, Batch, Dataset};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::pruning::{apply_threshold, PruneMask, SparsityReport};
use crate::regularization::{sgd_step_baseline, sgd_step_sensitivity, RegularizerKind, UpdateStep};
use crate::sensitivity::{into_bounded_insensitivity, SensitivityConfig, SensitivityState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub lambda: f64,
    pub threshold: f64,
    pub batch_size: usize,
    pub max_epochs_phase1: usize,
    pub max_epochs_phase2: usize,
    pub sensitivity: SensitivityConfig,
    pub regularizer: RegularizerKind,
    pub regularize_biases: bool,
    /// Test top-1 error, as a fraction, that counts as reaching the target.
    pub target_error: f64,
    pub seed: u64,
    /// Reductions in this build are always serial and fixed-order, so runs
    /// are reproducible either way; the flag is kept in the config echo.
    pub deterministic: bool,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            lambda: 1e-5,
            threshold: 1e-3,
            batch_size: 10,
            max_epochs_phase1: 100,
            max_epochs_phase2: 100,
            sensitivity: SensitivityConfig::default(),
            regularizer: RegularizerKind::Sensitivity,
            regularize_biases: true,
            target_error: 0.0195,
            seed: 0,
            deterministic: true,
            eval_batch: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.step().validate()?;
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {}", self.threshold)));
        }
        if !(self.target_error > 0.0 && self.target_error < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target error must be in (0, 1), got {}",
                self.target_error
            )));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::InvalidArgument("batch sizes must be > 0".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> UpdateStep {
        UpdateStep {
            eta: self.eta,
            lambda: self.lambda,
            regularize_biases: self.regularize_biases,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_err: f64,
    /// `None` once every parameter is pruned.
    pub ratio: Option<f64>,
    pub alive_percent: Vec<f64>,
    pub wall_s: f64,
}

impl EpochMetrics {
    /// Equality ignoring wall time.
    pub fn same_numbers(&self, other: &EpochMetrics) -> bool {
        EpochMetrics { wall_s: 0.0, ..self.clone() } == EpochMetrics { wall_s: 0.0, ..other.clone() }
    }
}

/// Mean cross-entropy and top-1 error of `net` on `ds`.
pub fn evaluate(net: &Network, ds: &Dataset, chunk: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let mut loss = 0.0;
    let mut wrong = 0usize;
    for b in chunks(ds, chunk) {
        let pass = net.run(&b.x)?;
        loss += net.cross_entropy(&pass, &b.labels)?.iter().sum::<f64>();
        wrong += pass
            .output()
            .argmax_rows()
            .iter()
            .zip(&b.labels)
            .filter(|(p, l)| p != l)
            .count();
    }
    let n = ds.len() as f64;
    Ok((loss / n, wrong as f64 / n))
}

/// One minibatch update. Returns the batch loss measured before the step.
pub fn train_step(net: &mut Network, batch: &Batch, cfg: &TrainConfig, mask: Option<&PruneMask>) -> Result<f64> {
    let pass = net.run(&batch.x)?;
    let (loss, grads) = net.loss_and_grad_pass(&pass, &batch.targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let step = cfg.step();
    match cfg.regularizer {
        // with lambda = 0 the pull is exactly zero; skip computing it
        RegularizerKind::Sensitivity if cfg.lambda > 0.0 => {
            let mut state = SensitivityState::empty(net);
            state.accumulate(net, &pass, Some(&batch.labels), &cfg.sensitivity)?;
            let sbar = into_bounded_insensitivity(state)?;
            drop(pass);
            sgd_step_sensitivity(net, &grads, &sbar, &step, mask)?;
        }
        RegularizerKind::Sensitivity => {
            sgd_step_baseline(net, &grads, RegularizerKind::None, &step, mask)?;
        }
        kind => sgd_step_baseline(net, &grads, kind, &step, mask)?,
    }
    Ok(loss)
}

/// Network and mask at the end of an epoch.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub net: Network,
    pub mask: PruneMask,
}

/// A failed run, with the last good epoch-end state when there is one.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub checkpoint: Option<Box<Checkpoint>>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self { error, checkpoint: None }
    }
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Phase 1 reached the target error.
    TargetReached,
    /// Phase 2 went above the target error and rolled back.
    TargetExceeded,
    /// The epoch budget ran out.
    EpochBudget,
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub net: Network,
    pub mask: PruneMask,
    pub history: Vec<EpochMetrics>,
    pub stop: StopReason,
    /// Epoch whose state was returned (0 = the incoming state).
    pub returned_epoch: usize,
    /// Test loss and error of the returned state.
    pub test_loss: f64,
    pub test_err: f64,
}

/// Where a phase starts counting epochs and what to tell about each one.
pub struct EpochContext<'a> {
    pub first_epoch: usize,
    pub started: Instant,
    pub observer: &'a mut dyn FnMut(&EpochMetrics),
}

impl EpochContext<'_> {
    pub fn new(observer: &mut dyn FnMut(&EpochMetrics)) -> EpochContext<'_> {
        EpochContext {
            first_epoch: 1,
            started: Instant::now(),
            observer,
        }
    }
}

fn metrics(
    net: &Network,
    mask: &PruneMask,
    test: &Dataset,
    cfg: &TrainConfig,
    phase: u8,
    epoch: usize,
    train_loss: f64,
    started: Instant,
) -> Result<EpochMetrics> {
    let (test_loss, test_err) = evaluate(net, test, cfg.eval_batch)?;
    let report = SparsityReport::new(net, Some(mask))?;
    Ok(EpochMetrics {
        phase,
        epoch,
        train_loss,
        test_loss,
        test_err,
        ratio: report.ratio,
        alive_percent: report.layers.iter().map(|l| l.alive_percent).collect(),
        wall_s: started.elapsed().as_secs_f64(),
    })
}

fn run_epoch(
    net: &mut Network,
    mask: Option<&PruneMask>,
    train: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for b in batches(train, cfg.batch_size, cfg.seed, epoch)? {
        total += train_step(net, &b, cfg, mask)? * b.labels.len() as f64;
    }
    Ok(total / train.len() as f64)
}

fn diverged(e: Error, epoch: usize, last_good: &Checkpoint) -> TrainFailure {
    match e {
        Error::NonFinite(reason) => TrainFailure {
            error: Error::Diverged { epoch, reason },
            checkpoint: Some(Box::new(last_good.clone())),
        },
        other => other.into(),
    }
}

/// Phase 1: plain training with the configured regularizer, no
/// thresholding, until the test error is at most the target. An incoming
/// network that already meets the target is returned untouched.
pub fn train_phase1(
    net: Network,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    ctx: &mut EpochContext<'_>,
) -> Result<PhaseOutcome, TrainFailure> {
    cfg.validate()?;
    let (loss0, err0) = evaluate(&net, test, cfg.eval_batch)?;
    let mask = PruneMask::all_alive(&net);
    let mut out = PhaseOutcome {
        net,
        mask,
        history: Vec::new(),
        stop: StopReason::EpochBudget,
        returned_epoch: 0,
        test_loss: loss0,
        test_err: err0,
    };
    if err0 <= cfg.target_error {
        out.stop = StopReason::TargetReached;
        return Ok(out);
    }
    for epoch in ctx.first_epoch..ctx.first_epoch + cfg.max_epochs_phase1 {
        let last_good = Checkpoint {
            epoch: out.returned_epoch,
            net: out.net.clone(),
            mask: out.mask.clone(),
        };
        let train_loss =
            run_epoch(&mut out.net, None, train, cfg, epoch).map_err(|e| diverged(e, epoch, &last_good))?;
        let m = metrics(&out.net, &out.mask, test, cfg, 1, epoch, train_loss, ctx.started)?;
        (ctx.observer)(&m);
        out.returned_epoch = epoch;
        out.test_loss = m.test_loss;
        out.test_err = m.test_err;
        let done = m.test_err <= cfg.target_error;
        out.history.push(m);
        if done {
            out.stop = StopReason::TargetReached;
            break;
        }
    }
    Ok(out)
}

/// Phase 2: training continues with magnitude thresholding after every
/// epoch. Stops at the first epoch whose post-threshold test error exceeds
/// the target and returns the last epoch-end state that met it.
pub fn train_phase2(
    net: Network,
    mask: PruneMask,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    ctx: &mut EpochContext<'_>,
) -> Result<PhaseOutcome, TrainFailure> {
    cfg.validate()?;
    mask.check_matches(&net)?;
    let (loss0, err0) = evaluate(&net, test, cfg.eval_batch)?;
    let mut current = Checkpoint { epoch: 0, net, mask };
    let mut good = (err0 <= cfg.target_error).then(|| (current.clone(), loss0, err0));
    let mut history = Vec::new();
    let mut stop = StopReason::EpochBudget;
    let mut last = (loss0, err0);
    for epoch in ctx.first_epoch..ctx.first_epoch + cfg.max_epochs_phase2 {
        let train_loss = run_epoch(&mut current.net, Some(&current.mask), train, cfg, epoch)
            .map_err(|e| diverged(e, epoch, good.as_ref().map_or(&current, |g| &g.0)))?;
        apply_threshold(&mut current.net, &mut current.mask, cfg.threshold)?;
        current.epoch = epoch;
        let m = metrics(&current.net, &current.mask, test, cfg, 2, epoch, train_loss, ctx.started)?;
        (ctx.observer)(&m);
        last = (m.test_loss, m.test_err);
        let ok = m.test_err <= cfg.target_error;
        history.push(m);
        if ok {
            good = Some((current.clone(), last.0, last.1));
        } else {
            stop = StopReason::TargetExceeded;
            break;
        }
    }
    let (state, test_loss, test_err) = match good {
        Some(g) => g,
        None => (current, last.0, last.1),
    };
    Ok(PhaseOutcome {
        returned_epoch: state.epoch,
        net: state.net,
        mask: state.mask,
        history,
        stop,
        test_loss,
        test_err,
    })
}

/// A fixed number of epochs with the configured regularizer and no
/// thresholding or early stop.
pub fn train_fixed(
    mut net: Network,
    epochs: usize,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    ctx: &mut EpochContext<'_>,
) -> Result<PhaseOutcome, TrainFailure> {
    cfg.validate()?;
    let mask = PruneMask::all_alive(&net);
    let mut history = Vec::new();
    let mut returned_epoch = 0;
    for epoch in ctx.first_epoch..ctx.first_epoch + epochs {
        let last_good = Checkpoint {
            epoch: returned_epoch,
            net: net.clone(),
            mask: mask.clone(),
        };
        let train_loss = run_epoch(&mut net, None, train, cfg, epoch).map_err(|e| diverged(e, epoch, &last_good))?;
        let m = metrics(&net, &mask, test, cfg, 1, epoch, train_loss, ctx.started)?;
        (ctx.observer)(&m);
        returned_epoch = epoch;
        history.push(m);
    }
    let (test_loss, test_err) = evaluate(&net, test, cfg.eval_batch)?;
    Ok(PhaseOutcome {
        net,
        mask,
        history,
        stop: StopReason::EpochBudget,
        returned_epoch,
        test_loss,
        test_err,
    })
}

/// Append-only CSV of epoch metrics.
pub struct MetricsCsv {
    out: BufWriter<File>,
}

impl MetricsCsv {
    pub fn create(path: &Path, layer_names: &[String]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut header = String::from("epoch,train_loss,test_loss,test_err,ratio");
        for n in layer_names {
            header.push_str(&format!(",alive_{n}"));
        }
        header.push_str(",wall_s");
        writeln!(out, "{header}").and_then(|_| out.flush()).map_err(|e| Error::io(path, e))?;
        Ok(Self { out })
    }

    pub fn row(m: &EpochMetrics) -> String {
        let ratio = m.ratio.map_or("inf".to_string(), |r| r.to_string());
        let mut line = format!("{},{},{},{},{}", m.epoch, m.train_loss, m.test_loss, m.test_err, ratio);
        for a in &m.alive_percent {
            line.push_str(&format!(",{a}"));
        }
        line.push_str(&format!(",{:.3}", m.wall_s));
        line
    }

    pub fn append(&mut self, m: &EpochMetrics) -> std::io::Result<()> {
        writeln!(self.out, "{}", Self::row(m))?;
        self.out.flush()
    }
}

/// Final record of a run, written next to the model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub recipe: Option<String>,
    pub architecture: String,
    pub config: TrainConfig,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub stop: StopReason,
    pub returned_epoch: usize,
    pub test_loss: f64,
    pub test_err: f64,
    pub sparsity: SparsityReport,
    pub model_file: Option<String>,
}

impl RunSummary {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Header and one row in the layout of a compression results table:
    /// alive percentage per layer, total alive, f32 footprint, ratio, error.
    pub fn table(&self, label: &str) -> String {
        render_table(label, &self.sparsity, self.test_err)
    }
}

pub fn render_table(label: &str, report: &SparsityReport, test_err: f64) -> String {
    let width = label.len().max(8);
    let mut head = format!("{:<width$}", "");
    let mut row = format!("{label:<width$}");
    for l in &report.layers {
        head.push_str(&format!(" {:>8}", l.name.to_uppercase()));
        row.push_str(&format!(" {:>7.2}%", l.alive_percent));
    }
    head.push_str(&format!(" {:>8} {:>10} {:>8} {:>8}", "Total", "Footprint", "Ratio", "Top-1"));
    row.push_str(&format!(
        " {:>7.2}k {:>8.2}kB {:>8} {:>7.2}%",
        report.alive as f64 / 1000.0,
        report.footprint_bytes as f64 / 1000.0,
        report.ratio_display(),
        100.0 * test_err
    ));
    format!("{head}\n{row}")
}
