//! Train → prune → quantize → compile, with artifacts for every stage.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pow2prune::autodiff::Model;
use pow2prune::costmodel::{self, CostReport};
use pow2prune::data::Dataset;
use pow2prune::inference;
use pow2prune::model_io::{self, Encoding};
use pow2prune::pruning::{self, PruneResult};
use pow2prune::quantization::{self, QuantResult};
use pow2prune::train::{self, Task, TrainRecord};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::datasets::{gen_split, Split};

/// Prints progress to stderr unless `POW2PRUNE_LOG=quiet`.
pub fn info(msg: impl AsRef<str>) {
    if std::env::var("POW2PRUNE_LOG").map_or(true, |v| v != "quiet") {
        eprintln!("{}", msg.as_ref());
    }
}

pub struct Data {
    pub train: Dataset,
    pub eval: Dataset,
}

impl Data {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            train: gen_split(&cfg.task, cfg.seed, cfg.n_train, Split::Train)?,
            eval: gen_split(&cfg.task, cfg.seed, cfg.n_eval, Split::Eval)?,
        })
    }

    pub fn task<'a>(&'a self, cfg: &ExperimentConfig) -> Task<'a> {
        Task {
            train: &self.train,
            eval: &self.eval,
            loss: cfg.loss,
            metric: cfg.metric,
        }
    }
}

/// Saves `model` and continues from what was written, so a stage run on its
/// own from the file sees exactly the same model.
pub fn persist(model: &Model, path: Option<&Path>, encoding: Encoding) -> Result<Model> {
    let bytes = model_io::to_bytes(model, encoding)?;
    if let Some(p) = path {
        fs::write(p, &bytes).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(model_io::from_bytes(&bytes)?)
}

pub fn train_stage(cfg: &ExperimentConfig, data: &Data) -> Result<(Model, Vec<TrainRecord>)> {
    let mut model = Model::build(data.train.sample_shape(), &cfg.layers, cfg.seed)?;
    let records = train::train(&mut model, &data.task(cfg), &cfg.train, cfg.seed)?;
    Ok((model, records))
}

pub fn prune_stage(cfg: &ExperimentConfig, data: &Data, model: &mut Model) -> Result<PruneResult> {
    Ok(pruning::prune_loop(
        model,
        &data.task(cfg),
        &cfg.prune.config,
        &cfg.finetune,
        cfg.seed,
    )?)
}

pub fn quant_stage(cfg: &ExperimentConfig, data: &Data, model: &mut Model) -> Result<QuantResult> {
    Ok(quantization::inq_loop(
        model,
        &data.task(cfg),
        &cfg.quant,
        &cfg.finetune,
        cfg.seed,
    )?)
}

/// Compiles the quantized model and checks the shift-based forward pass
/// against the reference on every evaluation input.
pub fn verify_shift(model: &Model, inputs: &pow2prune::Tensor) -> Result<u64> {
    let compiled = inference::compile(model)?;
    let shifted = inference::forward_shift(&compiled, inputs)?;
    let reference = model.evaluate(inputs)?;
    let same = shifted
        .output
        .data()
        .iter()
        .zip(reference.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        bail!("shift inference differs from the reference forward pass");
    }
    Ok(shifted.shift_ops)
}

#[derive(Debug, Clone, Serialize)]
pub struct StageSummary {
    pub stage: String,
    pub eval_metric: f64,
    pub cost: CostReport,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub baseline: Model,
    pub pruned: Option<Model>,
    pub quantized: Model,
    pub train: Vec<TrainRecord>,
    pub prune: Option<PruneResult>,
    pub quant: QuantResult,
    pub summary: Vec<StageSummary>,
}

impl PipelineReport {
    pub fn final_sparsity(&self) -> f64 {
        self.summary.last().map_or(0.0, |s| s.cost.sparsity)
    }

    pub fn final_metric(&self) -> f64 {
        self.summary.last().map_or(f64::NAN, |s| s.eval_metric)
    }
}

pub fn train_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from("epoch,train_loss,eval_metric\n");
    for r in records {
        out.push_str(&format!("{},{:.8},{:.4}\n", r.epoch, r.train_loss, r.eval_metric));
    }
    out
}

pub fn summary_csv(rows: &[StageSummary]) -> String {
    let base = rows
        .first()
        .and_then(|r| r.cost.memory_compressed)
        .unwrap_or(0) as f64;
    let mut out = String::from(
        "stage,eval_metric,sparsity,params_total,params_nonzero,memory_raw,memory_compressed,memory_pct,macs_dense,ops_effective,hw_cost\n",
    );
    for r in rows {
        let c = &r.cost;
        let comp = c.memory_compressed.unwrap_or(0);
        let pct = costmodel::memory_ratio(comp as f64, base).unwrap_or(0.0);
        out.push_str(&format!(
            "{},{:.4},{:.6},{},{},{},{},{:.2},{},{},{:.4}\n",
            r.stage,
            r.eval_metric,
            c.sparsity,
            c.params_total,
            c.params_nonzero,
            c.memory_raw,
            comp,
            pct,
            c.macs_dense,
            c.ops_effective,
            c.hw_cost
        ));
    }
    out
}

fn summarize(cfg: &ExperimentConfig, data: &Data, stage: &str, model: &Model) -> Result<StageSummary> {
    Ok(StageSummary {
        stage: stage.to_string(),
        eval_metric: data.task(cfg).eval_metric(model)?,
        cost: costmodel::cost_report(model, &cfg.cost)?,
    })
}

fn write(dir: Option<&Path>, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(d) = dir {
        let p = d.join(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// Runs every stage. With `out_dir`, writes models, CSVs and cost reports
/// there as each stage finishes, so earlier artifacts survive a failure.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<PipelineReport> {
    cfg.validate().context("stage config")?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let path = |name: &str| -> Option<PathBuf> { out_dir.map(|d| d.join(name)) };
    write(out_dir, "config.json", serde_json::to_string_pretty(cfg)?)?;
    let data = Data::generate(cfg).context("stage data")?;

    info(format!("[seed {}] training baseline", cfg.seed));
    let (model, train_records) = train_stage(cfg, &data).context("stage train")?;
    let baseline = persist(&model, path("baseline.spqf").as_deref(), Encoding::DenseF32)?;
    write(out_dir, "train.csv", train_csv(&train_records))?;
    let mut summary = vec![summarize(cfg, &data, "baseline", &baseline)?];

    let (pruned, prune_result) = if cfg.prune.enabled {
        info(format!("[seed {}] pruning", cfg.seed));
        let mut m = baseline.clone();
        let r = prune_stage(cfg, &data, &mut m).context("stage prune")?;
        let m = persist(&m, path("pruned.spqf").as_deref(), Encoding::DenseF32)?;
        write(out_dir, "prune.csv", r.to_csv())?;
        summary.push(summarize(cfg, &data, "pruned", &m)?);
        (Some(m), Some(r))
    } else {
        (None, None)
    };

    info(format!("[seed {}] quantizing", cfg.seed));
    let mut q = pruned.clone().unwrap_or_else(|| baseline.clone());
    let quant = quant_stage(cfg, &data, &mut q).context("stage quantize")?;
    let quantized = persist(&q, path("quantized.spqf").as_deref(), Encoding::SparsePow2)
        .context("stage quantize")?;
    write(out_dir, "quant.csv", quant.to_csv())?;
    summary.push(summarize(cfg, &data, "quantized", &quantized)?);

    verify_shift(&quantized, &data.eval.inputs).context("stage verify")?;
    for s in &summary {
        write(out_dir, &format!("cost_{}.json", s.stage), serde_json::to_string_pretty(&s.cost)?)?;
    }
    write(out_dir, "summary.csv", summary_csv(&summary))?;
    Ok(PipelineReport {
        baseline,
        pruned,
        quantized,
        train: train_records,
        prune: prune_result,
        quant,
        summary,
    })
}
