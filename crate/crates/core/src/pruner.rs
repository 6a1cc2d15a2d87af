//! Efficiency-aware gated training, export of the slimmed network, and
//! plain training/fine-tuning.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::autodiff::{BnMode, Graph, Var};
use crate::data::{augment_batch, epoch_order, Dataset};
use crate::efficiency::{EfficiencyEvaluator, Evaluator};
use crate::error::{invalid, Error, Result};
use crate::models::{Gating, Model};
use crate::optim::{step_schedule, Sgd};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EfficiencyMode {
    Latency,
    Flops,
    L1,
}

impl EfficiencyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EfficiencyMode::Latency => "latency",
            EfficiencyMode::Flops => "flops",
            EfficiencyMode::L1 => "l1",
        }
    }
}

impl core::str::FromStr for EfficiencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latency" => Ok(EfficiencyMode::Latency),
            "flops" => Ok(EfficiencyMode::Flops),
            "l1" | "l1_gates" => Ok(EfficiencyMode::L1),
            _ => Err(invalid(alloc::format!("unknown efficiency mode {s:?}"))),
        }
    }
}

/// One training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augment: bool,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            augment: true,
            eval_batch: 250,
        }
    }
}

/// Gated training stage plus the fine-tuning stage that follows export.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    pub alpha: f64,
    pub mode: EfficiencyMode,
    pub prune: TrainConfig,
    pub finetune: TrainConfig,
    pub min_open_gates: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            alpha: 1.5,
            mode: EfficiencyMode::Flops,
            prune: TrainConfig {
                lr: 1e-3,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                lr: 1e-2,
                ..TrainConfig::default()
            },
            min_open_gates: 1,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha must be a finite nonnegative number"));
        }
        if self.prune.epochs == 0 {
            return Err(invalid("prune stage needs at least one epoch"));
        }
        if self.min_open_gates == 0 {
            return Err(invalid("min_open_gates must be at least 1"));
        }
        Ok(())
    }
}

/// `acc + alpha * ln(1 + eff)` recorded on `g`.
pub fn efficiency_loss<T: Real>(g: &mut Graph<T>, acc: Var, eff: Var, alpha: f64) -> Result<Var> {
    if g.scalar(eff) < T::zero() {
        return Err(invalid("efficiency term must be nonnegative"));
    }
    let penalty = g.ln1p(eff)?;
    let penalty = g.scale(penalty, T::from_f64(alpha))?;
    g.add(acc, penalty)
}

pub fn efficiency_loss_value(acc: f64, eff: f64, alpha: f64) -> Result<f64> {
    if eff < 0.0 {
        return Err(invalid("efficiency term must be nonnegative"));
    }
    Ok(acc + alpha * Float::ln_1p(eff))
}

/// Sum of all gate values.
pub fn l1_gate_regularizer<T: Real>(gates: &[Option<Vec<T>>]) -> T {
    gates.iter().flatten().flat_map(|g| g.iter().copied()).sum()
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub acc_loss: f64,
    /// `Eff(c)` when an efficiency term is attached.
    pub efficiency: Option<f64>,
    /// Per-layer counts fed to the evaluator.
    pub counts: Vec<f64>,
}

/// One optimizer plus the loss definition of a stage.
pub struct Trainer<'e, T, E = Evaluator> {
    pub sgd: Sgd<T>,
    pub efficiency: Option<(&'e E, f64)>,
    pub gated: bool,
}

impl<'e, T: Real, E: EfficiencyEvaluator> Trainer<'e, T, E> {
    /// Cross-entropy only, gates ignored.
    pub fn plain(cfg: &TrainConfig) -> Self {
        Trainer {
            sgd: Sgd::new(T::from_f64(cfg.lr), T::from_f64(cfg.momentum), T::from_f64(cfg.weight_decay)),
            efficiency: None,
            gated: false,
        }
    }

    /// Gated forward; with `efficiency`, the loss is
    /// `CE + alpha * ln(1 + Eff(c))`.
    pub fn gated(cfg: &TrainConfig, efficiency: Option<(&'e E, f64)>) -> Self {
        Trainer {
            gated: true,
            efficiency,
            ..Self::plain(cfg)
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, x: &Tensor<T>, labels: &[usize]) -> Result<StepStats> {
        let mut g = Graph::new();
        let xv = g.input(x.clone())?;
        let gating = if self.gated { Gating::Learned } else { Gating::Off };
        let fwd = model.forward(&mut g, xv, BnMode::Train, gating, true)?;
        let ce = g.cross_entropy(fwd.logits, labels)?;
        let mut stats = StepStats {
            loss: 0.0,
            acc_loss: g.scalar(ce).as_f64(),
            efficiency: None,
            counts: Vec::new(),
        };
        let loss = match self.efficiency {
            None => ce,
            Some((e, alpha)) => {
                let counts = fwd
                    .gates
                    .iter()
                    .zip(&model.widths)
                    .map(|(gv, &w)| match gv {
                        Some(gv) => g.sum(*gv),
                        None => g.constant(T::from_f64(w as f64)),
                    })
                    .collect::<Result<Vec<_>>>()?;
                stats.counts = counts.iter().map(|&c| g.scalar(c).as_f64()).collect();
                let eff = e.evaluate_on(&mut g, &counts)?;
                stats.efficiency = Some(g.scalar(eff).as_f64());
                efficiency_loss(&mut g, ce, eff, alpha)?
            }
        };
        stats.loss = g.scalar(loss).as_f64();
        g.backward(loss)?;
        model.apply_sgd(&g, &fwd, &mut self.sgd)?;
        model.refresh_gates()?;
        Ok(stats)
    }
}

/// Per-epoch log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub acc_loss: f64,
    /// Mean `alpha * ln(1 + Eff)` over the epoch.
    pub eff_value: f64,
    /// `Eff` of the encoding at the end of the epoch.
    pub efficiency: Option<f64>,
    pub encoding: Vec<usize>,
    pub eval_accuracy: Option<f64>,
}

/// Top-1 accuracy in `[0, 1]` with eval-mode BN. Gates are applied when the
/// model carries them.
pub fn evaluate<T: Real>(model: &mut Model<T>, data: &Dataset<T>, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch("evaluate"));
    }
    let gating = if model.has_gates() { Gating::Learned } else { Gating::Off };
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.predict(&x, BnMode::Eval, gating)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Runs `cfg.epochs` epochs of `trainer` with the step learning-rate
/// schedule. Shuffling and augmentation draw from `rng`.
pub fn run_epochs<T: Real, E: EfficiencyEvaluator, R: Rng + ?Sized>(
    model: &mut Model<T>,
    trainer: &mut Trainer<'_, T, E>,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::EmptyBatch("training"));
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        trainer.sgd.lr = T::from_f64(step_schedule(cfg.lr, epoch, cfg.epochs));
        let order = epoch_order(train.len(), true, rng);
        let (mut loss, mut acc, mut pen, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, y) = train.batch(chunk)?;
            if cfg.augment {
                x = augment_batch(&x, rng)?;
            }
            let s = trainer.step(model, &x, &y)?;
            loss += s.loss;
            acc += s.acc_loss;
            pen += s.loss - s.acc_loss;
            steps += 1;
        }
        let encoding = model.encoding()?;
        let efficiency = match trainer.efficiency {
            Some((e, _)) => Some(e.evaluate(&encoding.iter().map(|&c| c as f64).collect::<Vec<_>>())?),
            None => None,
        };
        let eval_accuracy = match test {
            Some(t) => Some(evaluate(model, t, cfg.eval_batch)?),
            None => None,
        };
        let n = steps as f64;
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss / n,
            acc_loss: acc / n,
            eff_value: pen / n,
            efficiency,
            encoding,
            eval_accuracy,
        });
    }
    Ok(history)
}

/// Ordinary training of an ungated model.
pub fn train_baseline<T: Real, R: Rng + ?Sized>(
    model: &mut Model<T>,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochRecord>> {
    let mut trainer = Trainer::<T, Evaluator>::plain(cfg);
    run_epochs(model, &mut trainer, train, test, cfg, rng)
}

/// Efficiency-aware training of a gated model: conv weights and scorers are
/// updated together under `CE + alpha * ln(1 + Eff(c))`, where `c` counts
/// the open gates per layer.
pub fn prune_train<T: Real, E: EfficiencyEvaluator, R: Rng + ?Sized>(
    model: &mut Model<T>,
    evaluator: &E,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    cfg: &PruneConfig,
    rng: &mut R,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if !model.has_gates() {
        return Err(invalid("prune_train: model has no gates attached"));
    }
    if evaluator.num_layers() != model.num_layers() {
        return Err(Error::ShapeMismatch {
            op: "prune_train",
            expected: vec![model.num_layers()],
            got: vec![evaluator.num_layers()],
        });
    }
    model.min_open = cfg.min_open_gates;
    model.refresh_gates()?;
    let mut trainer = Trainer::gated(&cfg.prune, Some((evaluator, cfg.alpha)));
    run_epochs(model, &mut trainer, train, test, &cfg.prune, rng)
}

/// Fine-tunes an exported model; returns the history and final accuracy.
pub fn finetune<T: Real, R: Rng + ?Sized>(
    model: &mut Model<T>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Vec<EpochRecord>, f64)> {
    let history = train_baseline(model, train, Some(test), cfg, rng)?;
    let acc = match history.last().and_then(|h| h.eval_accuracy) {
        Some(a) => a,
        None => evaluate(model, test, cfg.eval_batch)?,
    };
    Ok((history, acc))
}

/// Slimmed network plus the original indices of the filters it kept.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedArchitecture<T> {
    pub kept: Vec<Vec<usize>>,
    pub model: Model<T>,
}

impl<T: Real> PrunedArchitecture<T> {
    pub fn encoding(&self) -> Vec<usize> {
        self.kept.iter().map(Vec::len).collect()
    }
}

/// Exports using gates recomputed from the model's current weights.
pub fn export_pruned<T: Real>(model: &Model<T>) -> Result<PrunedArchitecture<T>> {
    let gates = model.current_gates()?;
    let half = T::from_f64(0.5);
    let pattern: Vec<Option<Vec<T>>> = gates
        .into_iter()
        .map(|g| g.map(|g| g.into_iter().map(|v| if v >= half { T::one() } else { T::zero() }).collect()))
        .collect();
    export_with_pattern(model, &pattern)
}

/// Removes every filter whose gate is 0 in `pattern`.
pub fn export_with_pattern<T: Real>(model: &Model<T>, pattern: &[Option<Vec<T>>]) -> Result<PrunedArchitecture<T>> {
    model.validate_pattern(pattern)?;
    let kept: Vec<Vec<usize>> = pattern
        .iter()
        .zip(&model.widths)
        .map(|(p, &w)| match p {
            Some(p) => (0..w).filter(|&i| p[i] == T::one()).collect(),
            None => (0..w).collect(),
        })
        .collect();
    let sliced = model.slice(&kept)?;
    Ok(PrunedArchitecture { kept, model: sliced })
}
