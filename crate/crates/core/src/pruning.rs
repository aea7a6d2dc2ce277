//! Importance-threshold pruning with binary gates.
//!
//! Every mini-batch: backpropagate, score each weight, close the gate of
//! every weight scoring strictly below the threshold, then take an optimizer
//! step. Semi-soft training runs on raw weights and updates everything; hard
//! training runs on gated weights and never moves a pruned one.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ForwardMode, MaskedParameter, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::{self, stage_rng, GradMask, OptimConfig, Task};

/// First-order Taylor importance `(g·w)²`.
pub fn taylor_score(weight: f64, grad: f64) -> f64 {
    let p = grad * weight;
    p * p
}

pub fn abs_score(weight: f64) -> f64 {
    weight.abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SemiSoft,
    Hard,
}

impl Strategy {
    pub fn forward_mode(self) -> ForwardMode {
        match self {
            Strategy::SemiSoft => ForwardMode::Raw,
            Strategy::Hard => ForwardMode::Gated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    TaylorScore,
    AbsValue,
}

/// When scores are compared against the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// After every mini-batch, using that batch's gradient.
    PerBatch,
    /// Once per epoch, using the last batch's gradient.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub threshold: f64,
    pub strategy: Strategy,
    pub max_epochs: usize,
    pub target_sparsity: Option<f64>,
    /// Stop once the per-epoch sparsity gain stays below this for
    /// [`PruneConfig::PATIENCE`] consecutive epochs.
    pub convergence_delta: f64,
    pub criterion: Criterion,
    pub granularity: Granularity,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            threshold: 1e-11,
            strategy: Strategy::Hard,
            max_epochs: 50,
            target_sparsity: None,
            convergence_delta: 1e-4,
            criterion: Criterion::TaylorScore,
            granularity: Granularity::PerBatch,
        }
    }
}

impl PruneConfig {
    pub const PATIENCE: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) || !self.threshold.is_finite() {
            return Err(Error::Config(format!("threshold must be >= 0, got {}", self.threshold)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be > 0".into()));
        }
        if let Some(t) = self.target_sparsity {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("target_sparsity must be in [0, 1], got {t}")));
            }
        }
        if !(self.convergence_delta >= 0.0) {
            return Err(Error::Config("convergence_delta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Closes every open gate whose score is strictly below `threshold`.
/// Returns how many gates were closed.
pub fn apply_threshold(param: &mut MaskedParameter, scores: &Tensor, threshold: f64) -> Result<usize> {
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("threshold must be >= 0, got {threshold}")));
    }
    if scores.len() != param.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} gates",
            scores.len(),
            param.len()
        )));
    }
    let mut flipped = 0;
    for (i, &s) in scores.data().iter().enumerate() {
        if s < threshold && param.prune(i) {
            flipped += 1;
        }
    }
    Ok(flipped)
}

/// Scores for every entry of `param` from the weights used in the last
/// forward pass and the gradient currently stored.
pub fn scores(param: &MaskedParameter, criterion: Criterion, mode: ForwardMode) -> Tensor {
    let values = match mode {
        ForwardMode::Raw => param.base.value.data().to_vec(),
        ForwardMode::Gated => param.effective(),
    };
    let data = match criterion {
        Criterion::TaylorScore => values
            .iter()
            .zip(param.base.grad.data())
            .map(|(&w, &g)| taylor_score(w, g))
            .collect(),
        Criterion::AbsValue => values.iter().map(|&w| abs_score(w)).collect(),
    };
    Tensor::new(param.base.value.shape().to_vec(), data).expect("same shape")
}

/// Fraction of prunable weights whose effective value is zero.
pub fn sparsity(model: &Model) -> Result<f64> {
    let total = model.prunable_count();
    if total == 0 {
        return Err(Error::NoPrunableWeights);
    }
    let zeros: usize = model.weights().map(|(_, w)| w.zero_count()).sum();
    Ok(zeros as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub sparsity: f64,
    pub train_loss: f64,
    pub eval_metric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    Converged,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneResult {
    /// Row 0 is the state before pruning.
    pub trajectory: Vec<EpochStats>,
    pub stop: StopReason,
}

impl PruneResult {
    pub fn final_sparsity(&self) -> f64 {
        self.trajectory.last().map_or(0.0, |s| s.sparsity)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,sparsity,train_loss,eval_metric\n");
        for s in &self.trajectory {
            out.push_str(&format!(
                "{},{:.6},{:.8},{:.4}\n",
                s.epoch, s.sparsity, s.train_loss, s.eval_metric
            ));
        }
        out
    }
}

/// Threshold every weight tensor of `model` using the current gradients.
fn threshold_model(model: &mut Model, cfg: &PruneConfig) -> Result<usize> {
    let mode = cfg.strategy.forward_mode();
    let mut flipped = 0;
    for (_, w) in model.weights_mut() {
        let s = scores(w, cfg.criterion, mode);
        flipped += apply_threshold(w, &s, cfg.threshold)?;
    }
    Ok(flipped)
}

/// One pruning epoch. Returns the sparsity and mean training loss.
pub fn prune_epoch(
    model: &mut Model,
    task: &Task,
    cfg: &PruneConfig,
    optim: &OptimConfig,
    opt: &mut crate::autodiff::Sgd,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mask = GradMask {
        closed_gates: cfg.strategy == Strategy::Hard,
        frozen: true,
    };
    let loss = train::run_epoch(
        model,
        task.train,
        task.loss,
        opt,
        rng,
        optim.batch_size,
        cfg.strategy.forward_mode(),
        mask,
        |m, last| {
            if cfg.granularity == Granularity::PerBatch || last {
                threshold_model(m, cfg)?;
            }
            Ok(())
        },
        |_| {},
    )?;
    if !loss.is_finite() {
        return Err(Error::Diverged(loss));
    }
    Ok((sparsity(model)?, loss))
}

/// Prunes until the target sparsity is met, sparsity stops growing, or
/// `max_epochs` run out.
pub fn prune_loop(
    model: &mut Model,
    task: &Task,
    cfg: &PruneConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<PruneResult> {
    cfg.validate()?;
    optim.validate()?;
    let mut rng = stage_rng(seed, 2);
    let mut opt = optim.optimizer()?;
    let mut trajectory = vec![EpochStats {
        epoch: 0,
        sparsity: sparsity(model)?,
        train_loss: task.train_loss(model)?,
        eval_metric: task.eval_metric(model)?,
    }];
    let mut stalled = 0;
    let mut stop = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let prev = trajectory.last().expect("non-empty").sparsity;
        let (s, train_loss) = prune_epoch(model, task, cfg, optim, &mut opt, &mut rng)?;
        trajectory.push(EpochStats {
            epoch,
            sparsity: s,
            train_loss,
            eval_metric: task.eval_metric(model)?,
        });
        if cfg.target_sparsity.is_some_and(|t| s >= t) {
            stop = StopReason::TargetReached;
            break;
        }
        if s - prev < cfg.convergence_delta {
            stalled += 1;
            if stalled >= PruneConfig::PATIENCE {
                stop = StopReason::Converged;
                break;
            }
        } else {
            stalled = 0;
        }
    }
    Ok(PruneResult { trajectory, stop })
}
