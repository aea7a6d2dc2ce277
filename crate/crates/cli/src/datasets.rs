//! Synthetic and CSV-backed datasets.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pow2prune::data::Dataset;
use pow2prune::train::stage_rng;
use pow2prune::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// Left/right 1-D signals; the right one is the left shifted by a
    /// piecewise-constant integer amount per position. The target is that
    /// shift map. Input per sample is `[left, right]`, length `2·length`.
    ToyDisparity {
        length: usize,
        max_shift: usize,
        /// Constant-shift segments per sample.
        segments: usize,
    },
    /// Isotropic Gaussian blobs with one-hot targets.
    ToyClassify {
        classes: usize,
        dims: usize,
        spread: f64,
    },
    /// Numeric CSV with a header row; the last `target_columns` columns are
    /// targets. Rows are shuffled by seed and the tail becomes the eval split.
    CsvRegression {
        path: PathBuf,
        target_columns: usize,
        eval_fraction: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 100,
            Split::Eval => 101,
        }
    }
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::ToyDisparity { .. } => "toy_disparity",
            TaskSpec::ToyClassify { .. } => "toy_classify",
            TaskSpec::CsvRegression { .. } => "csv_regression",
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Result<Vec<usize>> {
        Ok(match self {
            TaskSpec::ToyDisparity { length, .. } => vec![2 * length],
            TaskSpec::ToyClassify { dims, .. } => vec![*dims],
            TaskSpec::CsvRegression { .. } => {
                let (inputs, _) = self.csv_rows()?;
                vec![inputs[0].len()]
            }
        })
    }

    fn csv_rows(&self) -> Result<(Rows, Rows)> {
        let TaskSpec::CsvRegression {
            path,
            target_columns,
            ..
        } = self
        else {
            unreachable!("csv task")
        };
        let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("row {}: non-numeric field", i + 1))?;
            if vals.len() <= *target_columns {
                bail!("row {}: {} columns, need more than {target_columns}", i + 1, vals.len());
            }
            let split = vals.len() - target_columns;
            xs.push(vals[..split].to_vec());
            ys.push(vals[split..].to_vec());
        }
        if xs.is_empty() {
            bail!("{} has no data rows", path.display());
        }
        Ok((xs, ys))
    }
}

/// Draws `n` samples of `split` deterministically from `seed`.
pub fn gen_split(task: &TaskSpec, seed: u64, n: usize, split: Split) -> Result<Dataset> {
    if n == 0 {
        bail!("n must be > 0");
    }
    let mut rng = stage_rng(seed, split.stream());
    match *task {
        TaskSpec::ToyDisparity {
            length,
            max_shift,
            segments,
        } => {
            if length == 0 || segments == 0 || segments > length {
                bail!("toy_disparity needs 0 < segments <= length");
            }
            let mut inputs = Vec::with_capacity(n * 2 * length);
            let mut targets = Vec::with_capacity(n * length);
            for _ in 0..n {
                let base: Vec<f64> = (0..length + max_shift).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut cuts: Vec<usize> = (1..length).collect();
                cuts.shuffle(&mut rng);
                let mut cuts = cuts[..segments - 1].to_vec();
                cuts.sort_unstable();
                cuts.push(length);
                let mut shifts = Vec::with_capacity(length);
                for &end in &cuts {
                    let d = rng.gen_range(0..=max_shift);
                    shifts.resize(end, d);
                }
                inputs.extend((0..length).map(|x| base[x + max_shift]));
                inputs.extend((0..length).map(|x| base[x + max_shift - shifts[x]]));
                targets.extend(shifts.iter().map(|&d| d as f64));
            }
            Ok(Dataset::new(
                Tensor::new(vec![n, 2 * length], inputs)?,
                Tensor::new(vec![n, length], targets)?,
            )?)
        }
        TaskSpec::ToyClassify { classes, dims, spread } => {
            if classes < 2 || dims == 0 || spread.is_nan() || spread <= 0.0 {
                bail!("toy_classify needs classes >= 2, dims > 0, spread > 0");
            }
            // centres are shared by both splits
            let mut crng = stage_rng(seed, 200);
            let centres: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..dims).map(|_| crng.gen_range(-2.0..2.0)).collect())
                .collect();
            let noise = Normal::new(0.0, spread)?;
            let mut inputs = Vec::with_capacity(n * dims);
            let mut targets = vec![0.0; n * classes];
            for s in 0..n {
                let c = rng.gen_range(0..classes);
                inputs.extend(centres[c].iter().map(|&m| m + noise.sample(&mut rng)));
                targets[s * classes + c] = 1.0;
            }
            Ok(Dataset::new(
                Tensor::new(vec![n, dims], inputs)?,
                Tensor::new(vec![n, classes], targets)?,
            )?)
        }
        TaskSpec::CsvRegression { eval_fraction, .. } => {
            let (xs, ys) = task.csv_rows()?;
            let mut order: Vec<usize> = (0..xs.len()).collect();
            order.shuffle(&mut stage_rng(seed, 300));
            let n_eval = ((xs.len() as f64 * eval_fraction).round() as usize).clamp(1, xs.len() - 1);
            let rows = match split {
                Split::Train => &order[n_eval..],
                Split::Eval => &order[..n_eval],
            };
            let rows = &rows[..n.min(rows.len())];
            let (fi, fo) = (xs[0].len(), ys[0].len());
            let mut inputs = Vec::with_capacity(rows.len() * fi);
            let mut targets = Vec::with_capacity(rows.len() * fo);
            for &r in rows {
                if xs[r].len() != fi || ys[r].len() != fo {
                    bail!("ragged CSV row {}", r + 1);
                }
                inputs.extend_from_slice(&xs[r]);
                targets.extend_from_slice(&ys[r]);
            }
            Ok(Dataset::new(
                Tensor::new(vec![rows.len(), fi], inputs)?,
                Tensor::new(vec![rows.len(), fo], targets)?,
            )?)
        }
    }
}

pub fn gen_data(task: &TaskSpec, seed: u64, n: usize) -> Result<Dataset> {
    gen_split(task, seed, n, Split::Train)
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(data)?).with_context(|| format!("writing {}", path.display()))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let d: Dataset = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Dataset::new(d.inputs, d.targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disparity(max_shift: usize) -> TaskSpec {
        TaskSpec::ToyDisparity {
            length: 8,
            max_shift,
            segments: 2,
        }
    }

    #[test]
    fn zero_shift_targets_are_zero() {
        let d = gen_data(&disparity(0), 1, 10).unwrap();
        assert!(d.targets.data().iter().all(|&t| t == 0.0));
        // right equals left
        for s in 0..10 {
            let row = d.inputs.row(s);
            assert_eq!(row[..8], row[8..]);
        }
    }

    #[test]
    fn right_is_shifted_left() {
        let d = gen_data(&disparity(3), 4, 20).unwrap();
        for s in 0..20 {
            let row = d.inputs.row(s);
            let t = d.targets.row(s);
            for x in 0..8 {
                let k = t[x] as usize;
                if x >= k {
                    assert_eq!(row[8 + x], row[x - k]);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = gen_data(&disparity(3), 7, 16).unwrap();
        let b = gen_data(&disparity(3), 7, 16).unwrap();
        assert_eq!(a, b);
        let c = gen_split(&disparity(3), 7, 16, Split::Eval).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn classify_shares_centres() {
        let t = TaskSpec::ToyClassify { classes: 3, dims: 2, spread: 0.01 };
        let a = gen_split(&t, 1, 50, Split::Train).unwrap();
        let b = gen_split(&t, 1, 50, Split::Eval).unwrap();
        // tight blobs: every eval point lies next to a train point of its class
        for s in 0..50 {
            let x = b.inputs.row(s);
            let near = (0..50)
                .min_by(|&i, &j| {
                    let di: f64 = a.inputs.row(i).iter().zip(x).map(|(p, q)| (p - q).powi(2)).sum();
                    let dj: f64 = a.inputs.row(j).iter().zip(x).map(|(p, q)| (p - q).powi(2)).sum();
                    di.total_cmp(&dj)
                })
                .unwrap();
            assert_eq!(a.targets.row(near), b.targets.row(s));
        }
    }

    #[test]
    fn bad_arguments() {
        assert!(gen_data(&disparity(3), 1, 0).is_err());
        let t = TaskSpec::ToyDisparity { length: 4, max_shift: 1, segments: 9 };
        assert!(gen_data(&t, 1, 4).is_err());
    }
}
