//! Mini-batch training shared by baseline training, pruning, and
//! quantization retraining.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ForwardMode, Loss, Model, Sgd};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::Metric;

/// Seeded generator for one named stage of an experiment. Stages draw from
/// separate streams so each can be rerun on its own.
pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        Sgd::new(self.learning_rate, self.momentum).map(|_| ())
    }

    pub fn optimizer(&self) -> Result<Sgd> {
        Sgd::new(self.learning_rate, self.momentum)
    }
}

/// Training and evaluation data with the loss and metric to use.
#[derive(Debug, Clone, Copy)]
pub struct Task<'a> {
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
    pub loss: Loss,
    pub metric: Metric,
}

impl Task<'_> {
    /// Test-time metric on the evaluation split.
    pub fn eval_metric(&self, model: &Model) -> Result<f64> {
        let pred = model.evaluate(&self.eval.inputs)?;
        self.metric.evaluate(&pred, &self.eval.targets)
    }

    /// Test-time loss on the training split.
    pub fn train_loss(&self, model: &Model) -> Result<f64> {
        model.loss(self.loss, &self.train.inputs, &self.train.targets, ForwardMode::Gated)
    }
}

/// Which weights get their gradient (and momentum) zeroed before a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradMask {
    pub closed_gates: bool,
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
}

/// One pass over shuffled mini-batches. `after_backward(model, last_batch)`
/// runs once the gradients are in place; `after_step` once the weights have
/// moved. Returns the sample-weighted mean batch loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_epoch(
    model: &mut Model,
    data: &Dataset,
    loss: Loss,
    opt: &mut Sgd,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    mode: ForwardMode,
    mask: GradMask,
    mut after_backward: impl FnMut(&mut Model, bool) -> Result<()>,
    mut after_step: impl FnMut(&mut Model),
) -> Result<f64> {
    let batches = data.batches(batch_size, rng);
    let last = batches.len() - 1;
    let mut total = 0.0;
    for (b, idx) in batches.iter().enumerate() {
        let (x, y) = data.subset(idx);
        let pred = model.forward(&x, mode)?;
        let e = model.backward(loss, &pred, &y)?;
        total += e * idx.len() as f64;
        after_backward(model, b == last)?;
        apply_mask(model, opt, mask);
        opt.step(model.parameters_mut())?;
        after_step(model);
    }
    Ok(total / data.len() as f64)
}

fn apply_mask(model: &mut Model, opt: &mut Sgd, mask: GradMask) {
    if !mask.closed_gates && !mask.frozen {
        return;
    }
    for (_, w) in model.weights_mut() {
        w.mask_grad(mask.closed_gates, mask.frozen);
        let id = w.base.id();
        for i in 0..w.len() {
            if (mask.closed_gates && !w.is_on(i)) || (mask.frozen && w.quant_state()[i].is_frozen())
            {
                opt.clear_velocity(id, i);
            }
        }
    }
}

/// Plain supervised training on effective weights.
pub fn train(model: &mut Model, task: &Task, cfg: &OptimConfig, seed: u64) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    let mut rng = stage_rng(seed, 1);
    let mut opt = cfg.optimizer()?;
    let mask = GradMask {
        closed_gates: true,
        frozen: true,
    };
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let train_loss = run_epoch(
            model,
            task.train,
            task.loss,
            &mut opt,
            &mut rng,
            cfg.batch_size,
            ForwardMode::Gated,
            mask,
            |_, _| Ok(()),
            |_| {},
        )?;
        if !train_loss.is_finite() {
            return Err(Error::Diverged(train_loss));
        }
        out.push(TrainRecord {
            epoch,
            train_loss,
            eval_metric: task.eval_metric(model)?,
        });
    }
    Ok(out)
}
