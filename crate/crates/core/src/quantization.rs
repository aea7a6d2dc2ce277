//! Incremental power-of-two quantization.
//!
//! Each step partitions the still-free weights of every layer by score,
//! snaps the top group onto a signed power-of-two grid and freezes it, then
//! retrains the rest. The schedule lists the cumulative fraction quantized
//! after each step and ends at 1.0; there is no retraining after the last
//! step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ForwardMode, MaskedParameter, Model, QuantState, Sgd};
use crate::error::{Error, Result};
use crate::pruning::{self, apply_threshold, taylor_score};
use crate::tensor::Tensor;
use crate::train::{self, stage_rng, GradMask, OptimConfig, Task};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 10;

/// Signed powers of two `±2^n` for `n_min ≤ n ≤ n_max`, plus zero.
/// `n_max − n_min + 1 = 2^(bits−2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pow2Grid {
    bits: u8,
    n_max: i32,
}

impl Pow2Grid {
    pub fn new(bits: u8, n_max: i32) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::Config(format!(
                "bits must be in {MIN_BITS}..={MAX_BITS}, got {bits}"
            )));
        }
        let g = Self { bits, n_max };
        if g.n_min() < f64::MIN_EXP - 1 || n_max >= f64::MAX_EXP {
            return Err(Error::Config(format!("exponent range of {g:?} leaves f64")));
        }
        Ok(g)
    }

    /// Grid for weights of largest magnitude `scale`:
    /// `n_max = floor(log2(4·scale/3))`.
    pub fn for_scale(scale: f64, bits: u8) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::NothingToQuantize);
        }
        Self::new(bits, floor_log2(4.0 * scale / 3.0))
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn n_max(&self) -> i32 {
        self.n_max
    }

    pub fn n_min(&self) -> i32 {
        self.n_max - self.exponents_per_sign() as i32 + 1
    }

    pub fn exponents_per_sign(&self) -> usize {
        1 << (self.bits - 2)
    }

    /// Every candidate value: zero, then `±2^n` from `n_max` downward.
    pub fn candidates(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        for n in (self.n_min()..=self.n_max).rev() {
            out.push(pow2(n));
            out.push(-pow2(n));
        }
        out
    }

    pub fn contains(&self, v: f64) -> bool {
        v == 0.0 || exponent_of_pow2(v).is_some_and(|n| (self.n_min()..=self.n_max).contains(&n))
    }

    /// Nearest candidate; ties go to the larger magnitude.
    pub fn snap(&self, w: f64) -> f64 {
        match self.snap_state(w) {
            QuantState::Quantized(n) if w < 0.0 => -pow2(n),
            QuantState::Quantized(n) => pow2(n),
            _ => 0.0,
        }
    }

    /// Like [`Pow2Grid::snap`] but reports the exponent.
    pub fn snap_state(&self, w: f64) -> QuantState {
        let a = w.abs();
        let lo = self.n_min();
        if a >= pow2(self.n_max) {
            return QuantState::Quantized(self.n_max);
        }
        if a < pow2(lo) {
            // midpoint between 0 and 2^lo
            return if a >= pow2(lo - 1) {
                QuantState::Quantized(lo)
            } else {
                QuantState::QuantizedZero
            };
        }
        // 2^k ≤ a < 2^(k+1) with lo ≤ k < n_max
        let k = floor_log2(a);
        if a >= 1.5 * pow2(k) {
            QuantState::Quantized(k + 1)
        } else {
            QuantState::Quantized(k)
        }
    }
}

/// Exact `2^n` for exponents in the normal range.
pub fn pow2(n: i32) -> f64 {
    if n >= f64::MIN_EXP - 1 {
        f64::from_bits(((n + 1023) as u64) << 52)
    } else {
        2f64.powi(n)
    }
}

/// `floor(log2(x))` for finite `x > 0`, exact.
pub fn floor_log2(x: f64) -> i32 {
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // subnormal
        let mant = bits & ((1u64 << 52) - 1);
        return -1074 + (63 - mant.leading_zeros() as i32);
    }
    biased - 1023
}

/// `Some(n)` when `v = ±2^n` exactly.
pub fn exponent_of_pow2(v: f64) -> Option<i32> {
    if v == 0.0 || !v.is_finite() {
        return None;
    }
    let a = v.abs();
    let n = floor_log2(a);
    (pow2(n) == a).then_some(n)
}

/// Grid from the largest effective magnitude of a weight tensor.
pub fn build_grid(weights: &Tensor, gate: &[bool], bits: u8) -> Result<Pow2Grid> {
    let s = weights
        .data()
        .iter()
        .zip(gate)
        .filter(|(_, &g)| g)
        .fold(0.0f64, |m, (&w, _)| m.max(w.abs()));
    if s == 0.0 {
        return Err(Error::NothingToQuantize);
    }
    Pow2Grid::for_scale(s, bits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Abs,
    Taylor,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub bits: u8,
    pub schedule: Vec<f64>,
    pub partition: Partition,
    pub retrain_epochs: usize,
    /// Taylor threshold for pruning free weights during retraining.
    pub interleaved_prune_threshold: Option<f64>,
    /// Samples in the calibration batch that scores each step.
    pub calibration_batch: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 5,
            schedule: vec![0.5, 0.875, 0.95, 1.0],
            partition: Partition::Taylor,
            retrain_epochs: 3,
            interleaved_prune_threshold: None,
            calibration_batch: 64,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        Pow2Grid::new(self.bits, 0)?;
        let s = &self.schedule;
        if s.is_empty() || s[s.len() - 1] != 1.0 {
            return Err(Error::Config("schedule must end at 1.0".into()));
        }
        if s[0] <= 0.0 || s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "schedule must be strictly increasing in (0, 1]: {s:?}"
            )));
        }
        if let Some(t) = self.interleaved_prune_threshold {
            if !(t >= 0.0) {
                return Err(Error::Config(format!("interleaved threshold must be >= 0, got {t}")));
            }
        }
        if self.calibration_batch == 0 {
            return Err(Error::Config("calibration_batch must be > 0".into()));
        }
        Ok(())
    }
}

/// Indices of the free, gated-on weights to quantize so that the
/// quantized share of gated-on weights reaches `fraction`. Highest scores
/// first; equal scores go to the lower index.
pub fn partition(param: &MaskedParameter, scores: &Tensor, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if scores.len() != param.len() {
        return Err(Error::Shape(format!("{} scores for {} weights", scores.len(), param.len())));
    }
    let total = param.gated_on_count();
    if total == 0 {
        return Ok(vec![]);
    }
    let done = param.quantized_on_count();
    let current = done as f64 / total as f64;
    if fraction < current - 1e-12 {
        return Err(Error::ScheduleRegression {
            requested: fraction,
            current,
        });
    }
    let wanted = ((fraction * total as f64) - 1e-9).ceil().clamp(0.0, total as f64) as usize;
    let need = wanted.saturating_sub(done);
    let mut free: Vec<usize> = (0..param.len())
        .filter(|&i| param.is_on(i) && !param.quant_state()[i].is_frozen())
        .collect();
    free.sort_by(|&a, &b| scores.data()[b].total_cmp(&scores.data()[a]).then(a.cmp(&b)));
    free.truncate(need);
    free.sort_unstable();
    Ok(free)
}

/// Per-step record, one row of the quantization report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step_fraction: f64,
    pub sparsity: f64,
    pub eval_metric: f64,
    /// Smallest per-layer quantized share of gated-on weights.
    pub min_layer_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantResult {
    /// Row 0 is the state before the first step.
    pub steps: Vec<StepStats>,
    pub retrain_phases: usize,
}

impl QuantResult {
    pub fn final_sparsity(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.sparsity)
    }

    pub fn final_metric(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.eval_metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step_fraction,sparsity,eval_metric\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:.6},{:.4}\n",
                s.step_fraction, s.sparsity, s.eval_metric
            ));
        }
        out
    }
}

/// Per-weight partition scores for every weight tensor, in layer order.
fn partition_scores(model: &mut Model, task: &Task, cfg: &QuantConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    match cfg.partition {
        Partition::Abs => Ok(model
            .weights()
            .map(|(_, w)| pruning::scores(w, pruning::Criterion::AbsValue, ForwardMode::Gated))
            .collect()),
        Partition::Random => Ok(model
            .weights()
            .map(|(_, w)| {
                let data = (0..w.len()).map(|_| rng.gen::<f64>()).collect();
                Tensor::new(w.base.value.shape().to_vec(), data).expect("sized")
            })
            .collect()),
        Partition::Taylor => {
            let n = task.train.len();
            let size = cfg.calibration_batch.min(n);
            let idx = rand::seq::index::sample(rng, n, size).into_vec();
            let (x, y) = task.train.subset(&idx);
            let pred = model.forward(&x, ForwardMode::Gated)?;
            model.backward(task.loss, &pred, &y)?;
            Ok(model
                .weights()
                .map(|(_, w)| pruning::scores(w, pruning::Criterion::TaylorScore, ForwardMode::Gated))
                .collect())
        }
    }
}

fn ensure_grids(model: &mut Model, bits: u8) -> Result<()> {
    for (_, w) in model.weights_mut() {
        if w.grid().is_some() {
            continue;
        }
        let grid = match build_grid(&w.base.value, w.gate(), bits) {
            Ok(g) => g,
            // every gated-on weight is zero; any grid snaps them to zero
            Err(Error::NothingToQuantize) => Pow2Grid::new(bits, 0)?,
            Err(e) => return Err(e),
        };
        w.set_grid(grid);
    }
    Ok(())
}

/// Quantizes each layer up to `schedule[step]` and freezes what it snaps.
pub fn quant_step(
    model: &mut Model,
    task: &Task,
    cfg: &QuantConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let fraction = *cfg
        .schedule
        .get(step)
        .ok_or_else(|| Error::Config(format!("no schedule entry {step}")))?;
    ensure_grids(model, cfg.bits)?;
    let scores = partition_scores(model, task, cfg, rng)?;
    for ((_, w), s) in model.weights_mut().zip(&scores) {
        let total = w.gated_on_count();
        // interleaved pruning can push a layer past the next fraction
        if total > 0 && w.quantized_on_count() as f64 / total as f64 >= fraction {
            continue;
        }
        let grid = *w.grid().expect("set above");
        for i in partition(w, s, fraction)? {
            let v = w.base.value.data()[i];
            let state = grid.snap_state(v);
            w.freeze(i, grid.snap(v), state);
        }
    }
    step_stats(model, task, fraction)
}

/// One-shot quantization of every remaining free weight, no retraining.
pub fn quantize_all(model: &mut Model, bits: u8) -> Result<()> {
    ensure_grids(model, bits)?;
    for (_, w) in model.weights_mut() {
        let grid = *w.grid().expect("set above");
        for i in 0..w.len() {
            if w.is_on(i) && !w.quant_state()[i].is_frozen() {
                let v = w.base.value.data()[i];
                let state = grid.snap_state(v);
                w.freeze(i, grid.snap(v), state);
            }
        }
    }
    Ok(())
}

fn step_stats(model: &Model, task: &Task, fraction: f64) -> Result<StepStats> {
    let min_layer_fraction = model
        .weights()
        .map(|(_, w)| {
            let t = w.gated_on_count();
            if t == 0 {
                1.0
            } else {
                w.quantized_on_count() as f64 / t as f64
            }
        })
        .fold(1.0, f64::min);
    Ok(StepStats {
        step_fraction: fraction,
        sparsity: pruning::sparsity(model)?,
        eval_metric: task.eval_metric(model)?,
        min_layer_fraction,
    })
}

fn clamp_free(model: &mut Model) {
    for (_, w) in model.weights_mut() {
        let Some(grid) = w.grid().copied() else { continue };
        let bound = 1.5 * pow2(grid.n_max());
        for i in 0..w.len() {
            if !w.quant_state()[i].is_frozen() {
                let v = &mut w.base.value.data_mut()[i];
                *v = v.clamp(-bound, bound);
            }
        }
    }
}

/// Taylor-thresholds free weights only; frozen ones are never pruned here.
fn prune_free(model: &mut Model, threshold: f64) -> Result<usize> {
    let mut flipped = 0;
    for (_, w) in model.weights_mut() {
        let eff = w.effective();
        let data = (0..w.len())
            .map(|i| {
                if w.quant_state()[i].is_frozen() {
                    f64::INFINITY
                } else {
                    taylor_score(eff[i], w.base.grad.data()[i])
                }
            })
            .collect();
        let s = Tensor::new(w.base.value.shape().to_vec(), data).expect("sized");
        flipped += apply_threshold(w, &s, threshold)?;
    }
    Ok(flipped)
}

/// Trains free weights for `epochs`; frozen and pruned weights get zero
/// gradient. Returns the mean training loss of each epoch.
pub fn retrain(
    model: &mut Model,
    task: &Task,
    cfg: &QuantConfig,
    optim: &OptimConfig,
    opt: &mut Sgd,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mask = GradMask {
        closed_gates: true,
        frozen: true,
    };
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let loss = train::run_epoch(
            model,
            task.train,
            task.loss,
            opt,
            rng,
            optim.batch_size,
            ForwardMode::Gated,
            mask,
            |m, _| {
                if let Some(t) = cfg.interleaved_prune_threshold {
                    prune_free(m, t)?;
                }
                Ok(())
            },
            clamp_free,
        )?;
        if !loss.is_finite() {
            return Err(Error::Diverged(loss));
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Runs every schedule step with retraining in between.
pub fn inq_loop(
    model: &mut Model,
    task: &Task,
    cfg: &QuantConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<QuantResult> {
    cfg.validate()?;
    optim.validate()?;
    let mut rng = stage_rng(seed, 3);
    let mut opt = optim.optimizer()?;
    let mut steps = vec![step_stats(model, task, 0.0)?];
    let mut retrain_phases = 0;
    let last = cfg.schedule.len() - 1;
    for k in 0..=last {
        steps.push(quant_step(model, task, cfg, k, &mut rng)?);
        if k < last {
            retrain(model, task, cfg, optim, &mut opt, cfg.retrain_epochs, &mut rng)?;
            retrain_phases += 1;
            // metric after retraining is what the next step starts from
            let row = steps.last_mut().expect("pushed");
            row.sparsity = pruning::sparsity(model)?;
            row.eval_metric = task.eval_metric(model)?;
        }
    }
    Ok(QuantResult {
        steps,
        retrain_phases,
    })
}

/// True when every prunable weight is gated off or sits exactly on its
/// layer's grid.
pub fn is_terminal(model: &Model) -> bool {
    model.weights().all(|(_, w)| {
        let Some(grid) = w.grid() else {
            return w.gated_on_count() == 0;
        };
        (0..w.len()).all(|i| !w.is_on(i) || grid.contains(w.base.value.data()[i]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Parameter;

    #[test]
    fn grid_examples() {
        let g = Pow2Grid::for_scale(1.0, 5).unwrap();
        assert_eq!((g.n_max(), g.n_min(), g.exponents_per_sign()), (0, -7, 8));
        assert_eq!(g.candidates().len(), 17);
        let g = Pow2Grid::for_scale(1.0, 3).unwrap();
        assert_eq!((g.n_max(), g.n_min(), g.exponents_per_sign()), (0, -1, 2));
        assert_eq!(Pow2Grid::for_scale(0.75, 5).unwrap().n_max(), 0);
        assert_eq!(Pow2Grid::for_scale(0.7499, 5).unwrap().n_max(), -1);
    }

    #[test]
    fn build_grid_uses_gated_max() {
        let w = Tensor::from_vec(vec![0.1, -3.0, 0.5]);
        let g = build_grid(&w, &[true, false, true], 5).unwrap();
        assert_eq!(g.n_max(), -1); // 4·0.5/3 = 0.667
        assert!(matches!(
            build_grid(&Tensor::from_vec(vec![0.0, 0.0]), &[true, true], 5),
            Err(Error::NothingToQuantize)
        ));
    }

    #[test]
    fn snap_examples() {
        let g = Pow2Grid::new(5, 0).unwrap();
        assert_eq!(g.snap(0.0), 0.0);
        assert_eq!(g.snap(0.3), 0.25);
        assert_eq!(g.snap(0.125), 0.125);
        assert_eq!(g.snap(-0.3), -0.25);
        // midpoint 0.375 between 0.25 and 0.5 goes up
        assert_eq!(g.snap(0.375), 0.5);
        assert_eq!(g.snap(7.0), 1.0);
        // below 2^-8 snaps to zero
        assert_eq!(g.snap(2f64.powi(-9)), 0.0);
        assert_eq!(g.snap(2f64.powi(-8)), 2f64.powi(-7));
    }

    #[test]
    fn pow2_helpers() {
        assert_eq!(pow2(-3), 0.125);
        assert_eq!(floor_log2(0.3), -2);
        assert_eq!(floor_log2(1.0), 0);
        assert_eq!(floor_log2(f64::MIN_POSITIVE / 4.0), -1024);
        assert_eq!(exponent_of_pow2(-0.25), Some(-2));
        assert_eq!(exponent_of_pow2(0.3), None);
    }

    fn masked(v: &[f64]) -> MaskedParameter {
        MaskedParameter::new(Parameter::new(0, Tensor::from_vec(v.to_vec())))
    }

    #[test]
    fn partition_top_half() {
        let p = masked(&[0.1, 0.2, 0.3, 0.4]);
        let s = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(partition(&p, &s, 0.5).unwrap(), vec![2, 3]);
        assert_eq!(partition(&p, &s, 1.0).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn partition_rejects_regression() {
        let mut p = masked(&[0.1, 0.2, 0.3, 0.4]);
        for i in 0..3 {
            p.freeze(i, 0.125, QuantState::Quantized(-3));
        }
        let s = Tensor::from_vec(vec![0.0; 4]);
        assert!(matches!(
            partition(&p, &s, 0.5),
            Err(Error::ScheduleRegression { .. })
        ));
        assert_eq!(partition(&p, &s, 1.0).unwrap(), vec![3]);
    }

    #[test]
    fn schedule_validation() {
        let ok = QuantConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [vec![0.5, 0.9], vec![0.5, 0.5, 1.0], vec![0.0, 1.0], vec![]] {
            let c = QuantConfig { schedule: bad, ..Default::default() };
            assert!(c.validate().is_err());
        }
        assert!(QuantConfig { bits: 1, ..Default::default() }.validate().is_err());
    }
}
