//! Optimizers, schedules, losses and the two-phase alternating trainer.

mod loss;
mod optim;
mod schedule;

pub use loss::{cross_entropy, dice_loss, dice_loss_value, one_hot, DICE_SMOOTH};
pub use optim::{Optimizer, OptimizerKind};
pub use schedule::{cosine_lr, Schedule};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{CrnpModel, ForwardOptions, Task};
use crate::tensor::{Fingerprint, ParamGroup, Rng, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Number of main-phase updates.
    pub total_iterations: usize,
    pub batch_size: usize,
    /// Predictor updates per main update.
    pub cadence: usize,
    /// Predictor updates before the first main update.
    pub rnp_warmup_steps: usize,
    /// Peak learning rate of the predictor phase; `None` uses `lr`.
    pub rnp_lr: Option<f64>,
    /// Optimizer of the predictor phase; `None` uses `optimizer`.
    pub rnp_optimizer: Option<OptimizerKind>,
    pub seed: u64,
}

impl TrainConfig {
    /// Adam at 3e-4 with weight decay 1e-5 and betas (0.9, 0.999).
    pub fn classification() -> Self {
        Self {
            optimizer: OptimizerKind::adam(),
            lr: 3e-4,
            lr_min: 0.0,
            weight_decay: 1e-5,
            schedule: Schedule::Constant,
            total_iterations: 1000,
            batch_size: 64,
            cadence: 1,
            rnp_warmup_steps: 200,
            rnp_lr: None,
            rnp_optimizer: None,
            seed: 0,
        }
    }

    /// SGD with momentum 0.99 at 1e-3, cosine annealed, batch size 2.
    pub fn segmentation() -> Self {
        Self {
            optimizer: OptimizerKind::sgd(0.99),
            lr: 1e-3,
            schedule: Schedule::Cosine,
            batch_size: 2,
            weight_decay: 1e-5,
            ..Self::classification()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 freezes the main phase, which only makes sense with an
        // explicit predictor rate
        let frozen_main = self.lr == 0.0 && self.rnp_lr.is_some();
        if !(self.lr > 0.0 || frozen_main) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(r) = self.rnp_lr {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::config(format!("rnp_lr must be positive, got {r}")));
            }
        }
        if self.cadence == 0 {
            return Err(Error::config("cadence must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.lr_min < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("lr_min and weight_decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Rnp,
    Main,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Rnp => "rnp",
            Phase::Main => "main",
        }
    }
}

/// Fingerprints of the three parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupPrints {
    pub main: Fingerprint,
    pub predictor: Fingerprint,
    pub frozen: Fingerprint,
}

impl GroupPrints {
    pub fn of(model: &CrnpModel) -> Self {
        Self {
            main: model.store.fingerprint(ParamGroup::Main),
            predictor: model.store.fingerprint(ParamGroup::Predictor),
            frozen: model.store.fingerprint(ParamGroup::Frozen),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub cycle: usize,
    pub phase: Phase,
    pub before: GroupPrints,
    pub after: GroupPrints,
}

/// Per-step group fingerprints; checks that the predictor phase touches
/// only predictor weights and the main phase never touches them.
#[derive(Clone, Debug, Default)]
pub struct PhaseLedger {
    pub entries: Vec<LedgerEntry>,
}

impl PhaseLedger {
    pub fn record(&mut self, cycle: usize, phase: Phase, before: GroupPrints, after: GroupPrints) -> Result<()> {
        let violation = |group: &'static str| Error::Ledger {
            cycle,
            phase: phase.label(),
            group,
        };
        if before.frozen != after.frozen {
            return Err(violation("random target"));
        }
        match phase {
            Phase::Rnp if before.main != after.main => return Err(violation("main")),
            Phase::Main if before.predictor != after.predictor => return Err(violation("predictor")),
            _ => {}
        }
        self.entries.push(LedgerEntry {
            cycle,
            phase,
            before,
            after,
        });
        Ok(())
    }

    pub fn count(&self, phase: Phase) -> usize {
        self.entries.iter().filter(|e| e.phase == phase).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub ledger: PhaseLedger,
}

impl TrainReport {
    pub fn rnp_updates(&self) -> usize {
        self.ledger.count(Phase::Rnp)
    }

    pub fn main_updates(&self) -> usize {
        self.ledger.count(Phase::Main)
    }

    /// Writes the trace as CSV with columns `iteration,phase,loss,lr`.
    pub fn write_trace(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| Error::io("<loss trace>", std::io::Error::other(e));
        for row in &self.trace {
            w.serialize(row).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io("<loss trace>", e))
    }

    pub fn save_trace(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_trace(file)
    }
}

/// Cycles through shuffled epochs of a dataset in fixed-size batches.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: Rng,
}

impl Batches {
    fn new(n: usize, size: usize, rng: Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            size: size.min(n),
            rng,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

/// One predictor-phase update of every modality's RNP on the current
/// encoder features. Returns the summed objective.
pub fn rnp_phase_step(model: &mut CrnpModel, optimizer: &mut Optimizer, inputs: &[Tensor], lr: f64) -> Result<f64> {
    let features = model.encode(inputs)?;
    let CrnpModel { bundles, store, .. } = model;
    let mut total = 0.0;
    for (b, f) in bundles.iter().zip(&features) {
        total += b.rnp.fit_step(store, optimizer, f, lr)?;
    }
    Ok(total)
}

/// Task loss of one forward pass: cross-entropy, plus soft Dice for dense
/// prediction, summed over decoders.
pub fn main_phase_step(
    model: &mut CrnpModel,
    optimizer: &mut Optimizer,
    inputs: &[Tensor],
    labels: &[usize],
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::tracking(&[ParamGroup::Main]);
    let fwd = model.forward(&mut tape, inputs, ForwardOptions::default())?;
    let target = match model.config.task {
        Task::Classification => None,
        Task::DensePrediction => {
            let s = tape.shape(fwd.logits).to_vec();
            Some(one_hot(labels, s[0], s[1], &s[2..])?)
        }
    };
    let mut loss = None;
    for &logits in &fwd.decoder_logits {
        let mut l = cross_entropy(&mut tape, logits, labels)?;
        if let Some(t) = &target {
            let probs = tape.softmax(logits, 1)?;
            let d = dice_loss(&mut tape, probs, t)?;
            l = tape.add(l, d)?;
        }
        loss = Some(match loss {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let loss = loss.expect("at least one decoder");
    let value = tape.scalar(loss)?;
    tape.backward(loss)?;
    let ids = model.main_ids();
    for &id in &ids {
        model.store.get_mut(id).value.zero_grad();
    }
    tape.accumulate_param_grads(&mut model.store)?;
    optimizer.step(&mut model.store, &ids, lr)?;
    Ok(value)
}

/// Alternating optimization: `rnp_warmup_steps` predictor updates, then
/// cycles of `cadence` predictor updates followed by one main update.
/// Models without uncertainty weighting skip the predictor phase.
pub fn alternating_train(model: &mut CrnpModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    alternating_train_with(model, data, cfg, 0, |_, _| Ok(()))
}

/// [`alternating_train`] that calls `hook(iteration, model)` after every
/// `every`-th main step (never when `every` is 0).
pub fn alternating_train_with(
    model: &mut CrnpModel,
    data: &Dataset,
    cfg: &TrainConfig,
    every: usize,
    mut hook: impl FnMut(usize, &CrnpModel) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    if data.modality_count() != model.modality_count() {
        return Err(Error::usage(format!(
            "dataset has {} modalities, model expects {}",
            data.modality_count(),
            model.modality_count()
        )));
    }
    let rng = Rng::new(cfg.seed);
    let mut batches = Batches::new(data.len(), cfg.batch_size, rng.derive(1));
    let mut main_opt = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut rnp_opt = Optimizer::new(cfg.rnp_optimizer.unwrap_or(cfg.optimizer), 0.0);
    let rnp_peak = cfg.rnp_lr.unwrap_or(cfg.lr);
    let uses_rnp = model.config.mode.uses_uncertainty();
    let mut report = TrainReport::default();

    let mut rnp_step = |model: &mut CrnpModel, report: &mut TrainReport, cycle: usize, lr: f64, inputs: &[Tensor]| {
        let before = GroupPrints::of(model);
        let loss = rnp_phase_step(model, &mut rnp_opt, inputs, lr)?;
        report.ledger.record(cycle, Phase::Rnp, before, GroupPrints::of(model))?;
        report.trace.push(TraceRow {
            iteration: cycle,
            phase: Phase::Rnp,
            loss,
            lr,
        });
        Ok::<_, Error>(())
    };

    if uses_rnp {
        for _ in 0..cfg.rnp_warmup_steps {
            let (inputs, _) = data.batch(&batches.next());
            rnp_step(model, &mut report, 0, rnp_peak, &inputs)?;
        }
    }
    for t in 0..cfg.total_iterations {
        let lr = cfg.schedule.lr(t, cfg.total_iterations, cfg.lr, cfg.lr_min);
        let (inputs, labels) = data.batch(&batches.next());
        if uses_rnp {
            let rnp_lr = cfg.schedule.lr(t, cfg.total_iterations, rnp_peak, cfg.lr_min.min(rnp_peak));
            for _ in 0..cfg.cadence {
                rnp_step(model, &mut report, t + 1, rnp_lr, &inputs)?;
            }
        }
        let before = GroupPrints::of(model);
        let loss = main_phase_step(model, &mut main_opt, &inputs, &labels, lr)?;
        report.ledger.record(t + 1, Phase::Main, before, GroupPrints::of(model))?;
        report.trace.push(TraceRow {
            iteration: t + 1,
            phase: Phase::Main,
            loss,
            lr,
        });
        if !loss.is_finite() {
            return Err(Error::Invariant(format!("main loss diverged at iteration {}", t + 1)));
        }
        if every > 0 && (t + 1) % every == 0 {
            hook(t + 1, model)?;
        }
    }
    for b in &model.bundles {
        b.rnp.verify_target(&model.store)?;
    }
    Ok(report)
}
