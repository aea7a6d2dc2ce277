//! Tables built from the CSV files a pipeline run leaves behind.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

type Rows = Vec<BTreeMap<String, String>>;

pub fn read_csv(path: &Path) -> Result<Rows> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("parsing {}", path.display()))?;
        rows.push(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect());
    }
    Ok(rows)
}

fn field<'a>(row: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    row.get(key).map(String::as_str).with_context(|| format!("missing column {key}"))
}

/// Per-stage table of accuracy, sparsity, memory and compute.
pub fn report(run_dir: &Path) -> Result<String> {
    let rows = read_csv(&run_dir.join("summary.csv"))?;
    if rows.is_empty() {
        bail!("{} has no rows", run_dir.join("summary.csv").display());
    }
    let mut out = format!(
        "{:<10} {:>8} {:>9} {:>10} {:>12} {:>8} {:>12} {:>12}\n",
        "stage", "metric", "sparsity", "nonzero", "compressed", "mem %", "ops", "hw_cost"
    );
    for r in &rows {
        let sparsity: f64 = field(r, "sparsity")?.parse()?;
        out.push_str(&format!(
            "{:<10} {:>8} {:>8.2}% {:>10} {:>12} {:>7}% {:>12} {:>12}\n",
            field(r, "stage")?,
            field(r, "eval_metric")?,
            100.0 * sparsity,
            field(r, "params_nonzero")?,
            field(r, "memory_compressed")?,
            field(r, "memory_pct")?,
            field(r, "ops_effective")?,
            field(r, "hw_cost")?,
        ));
    }
    Ok(out)
}

/// Joins the quantization step curves of two runs row by row.
pub fn compare(a: &Path, b: &Path) -> Result<String> {
    let ra = read_csv(&a.join("quant.csv"))?;
    let rb = read_csv(&b.join("quant.csv"))?;
    let mut out = String::from("step_fraction,sparsity_a,eval_metric_a,sparsity_b,eval_metric_b\n");
    for i in 0..ra.len().max(rb.len()) {
        let get = |rows: &Rows, k: &str| -> Result<String> {
            rows.get(i).map_or(Ok(String::new()), |r| field(r, k).map(str::to_string))
        };
        let frac = match ra.get(i).or(rb.get(i)) {
            Some(r) => field(r, "step_fraction")?.to_string(),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            frac,
            get(&ra, "sparsity")?,
            get(&ra, "eval_metric")?,
            get(&rb, "sparsity")?,
            get(&rb, "eval_metric")?
        ));
    }
    Ok(out)
}
