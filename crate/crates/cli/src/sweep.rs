//! Pruning criterion comparison over a range of thresholds.

use anyhow::{Context, Result};
use pow2prune::exec;
use pow2prune::pruning::{self, Criterion, PruneConfig};

use crate::config::ExperimentConfig;
use crate::pipeline::{info, persist, train_stage, Data};
use pow2prune::model_io::Encoding;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub criterion: Criterion,
    pub threshold: f64,
    pub epoch: usize,
    pub sparsity: f64,
    pub train_loss: f64,
    pub eval_metric: f64,
}

fn criterion_name(c: Criterion) -> &'static str {
    match c {
        Criterion::TaylorScore => "taylor_score",
        Criterion::AbsValue => "abs_value",
    }
}

/// Trains one baseline, then prunes a copy of it for every
/// (criterion, threshold) pair. Rows come back in input order.
pub fn criterion_sweep(
    cfg: &ExperimentConfig,
    runs: &[(Criterion, f64)],
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let data = Data::generate(cfg)?;
    info("training sweep baseline");
    let (model, _) = train_stage(cfg, &data).context("stage train")?;
    let baseline = persist(&model, None, Encoding::DenseF32)?;
    let results = exec::map_indexed(runs.len(), |i| {
        let (criterion, threshold) = runs[i];
        let pc = PruneConfig {
            criterion,
            threshold,
            ..cfg.prune.config.clone()
        };
        let mut m = baseline.clone();
        pruning::prune_loop(&mut m, &data.task(cfg), &pc, &cfg.finetune, cfg.seed)
            .map(|r| (criterion, threshold, r))
    });
    let mut rows = Vec::new();
    for r in results {
        let (criterion, threshold, res) = r.context("stage prune")?;
        rows.extend(res.trajectory.iter().map(|e| SweepRow {
            criterion,
            threshold,
            epoch: e.epoch,
            sparsity: e.sparsity,
            train_loss: e.train_loss,
            eval_metric: e.eval_metric,
        }));
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("criterion,threshold,epoch,sparsity,train_loss,eval_metric\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{},{:.6},{:.8},{:.4}\n",
            criterion_name(r.criterion),
            r.threshold,
            r.epoch,
            r.sparsity,
            r.train_loss,
            r.eval_metric
        ));
    }
    out
}
