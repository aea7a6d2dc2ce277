use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Mean of squared errors over every element.
    Mse,
    /// Mean over rows of `-Σ t·log softmax(p)`. Targets are per-row
    /// distributions (one-hot for hard labels).
    SoftmaxCrossEntropy,
}

impl Loss {
    /// Returns the loss value and `∂E/∂prediction`.
    pub fn evaluate(self, pred: &Tensor, target: &Tensor) -> Result<(f64, Vec<f64>)> {
        if pred.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        if pred.is_empty() {
            return Err(Error::Empty);
        }
        match self {
            Loss::Mse => {
                let n = pred.len() as f64;
                let mut value = 0.0;
                let grad = pred
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        let d = p - t;
                        value += d * d;
                        2.0 * d / n
                    })
                    .collect();
                Ok((value / n, grad))
            }
            Loss::SoftmaxCrossEntropy => {
                let rows = pred.rows().max(1);
                let width = pred.len() / rows;
                let mut value = 0.0;
                let mut grad = vec![0.0; pred.len()];
                for r in 0..rows {
                    let p = &pred.data()[r * width..(r + 1) * width];
                    let t = &target.data()[r * width..(r + 1) * width];
                    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum_exp: f64 = p.iter().map(|&v| (v - max).exp()).sum();
                    let lse = max + sum_exp.ln();
                    let t_sum: f64 = t.iter().sum();
                    for j in 0..width {
                        value -= t[j] * (p[j] - lse);
                        let soft = (p[j] - lse).exp();
                        grad[r * width + j] = (t_sum * soft - t[j]) / rows as f64;
                    }
                }
                // rounding can leave a tiny negative at the optimum
                Ok(((value / rows as f64).max(0.0), grad))
            }
        }
    }
}
