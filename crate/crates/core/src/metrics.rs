use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Evaluation metric. Accuracy-style metrics are percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Metric {
    /// % of entries with `|p − t| ≤ τ` (the complement of an end-point
    /// error count with threshold τ).
    ThresholdAccuracy(f64),
    /// % of entries with `t ≠ 0` and `|p − t| ≤ τ·|t|`.
    DeltaRelative(f64),
    Mse,
    /// % of rows whose argmax matches.
    Top1,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Mse)
    }

    pub fn evaluate(self, pred: &Tensor, target: &Tensor) -> Result<f64> {
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
        let pairs = pred.data().iter().zip(target.data());
        let pct = |hits: usize, total: usize| 100.0 * hits as f64 / total as f64;
        match self {
            Metric::ThresholdAccuracy(tau) => {
                let hits = pairs.filter(|(&p, &t)| (p - t).abs() <= tau).count();
                Ok(pct(hits, pred.len()))
            }
            Metric::DeltaRelative(tau) => {
                let (mut hits, mut total) = (0, 0);
                for (&p, &t) in pairs.filter(|(_, &t)| t != 0.0) {
                    total += 1;
                    if (p - t).abs() <= tau * t.abs() {
                        hits += 1;
                    }
                }
                if total == 0 {
                    return Err(Error::Empty);
                }
                Ok(pct(hits, total))
            }
            Metric::Mse => {
                Ok(pairs.map(|(&p, &t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
            }
            Metric::Top1 => {
                let rows = pred.rows();
                let width = pred.row_len();
                let argmax = |r: &[f64]| {
                    r.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                            if v > bv {
                                (i, v)
                            } else {
                                (bi, bv)
                            }
                        })
                        .0
                };
                let hits = (0..rows)
                    .filter(|&r| {
                        argmax(&pred.data()[r * width..(r + 1) * width])
                            == argmax(&target.data()[r * width..(r + 1) * width])
                    })
                    .count();
                Ok(pct(hits, rows))
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::ThresholdAccuracy(t) => write!(f, "threshold:{t}"),
            Metric::DeltaRelative(t) => write!(f, "delta:{t}"),
            Metric::Mse => f.write_str("mse"),
            Metric::Top1 => f.write_str("top1"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_tau = |v: &str| -> Result<f64> {
            let tau: f64 = v
                .parse()
                .map_err(|_| Error::Config(format!("bad metric tolerance {v:?}")))?;
            if !(tau > 0.0) {
                return Err(Error::Config(format!("metric tolerance must be > 0, got {tau}")));
            }
            Ok(tau)
        };
        match s.split_once(':') {
            Some(("threshold", v)) => Ok(Metric::ThresholdAccuracy(parse_tau(v)?)),
            Some(("delta", v)) => Ok(Metric::DeltaRelative(parse_tau(v)?)),
            None if s == "mse" => Ok(Metric::Mse),
            None if s == "top1" => Ok(Metric::Top1),
            _ => Err(Error::Config(format!("unknown metric {s:?}"))),
        }
    }
}

impl TryFrom<String> for Metric {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Metric> for String {
    fn from(m: Metric) -> String {
        m.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let x = t(&[1.0, 2.0, 0.5]);
        for m in [Metric::ThresholdAccuracy(1.0), Metric::DeltaRelative(0.02), Metric::Top1] {
            assert_eq!(m.evaluate(&x, &x).unwrap(), 100.0);
        }
        assert_eq!(Metric::Mse.evaluate(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn threshold_boundary_inclusive() {
        assert_eq!(Metric::ThresholdAccuracy(3.0).evaluate(&t(&[3.0, 0.0]), &t(&[0.0, 0.0])).unwrap(), 100.0);
        assert_eq!(Metric::ThresholdAccuracy(3.0).evaluate(&t(&[3.5, 0.0]), &t(&[0.0, 0.0])).unwrap(), 50.0);
    }

    #[test]
    fn delta_relative_excess() {
        assert_eq!(Metric::DeltaRelative(0.02).evaluate(&t(&[1.03]), &t(&[1.0])).unwrap(), 0.0);
        assert_eq!(Metric::DeltaRelative(0.02).evaluate(&t(&[1.01]), &t(&[1.0])).unwrap(), 100.0);
    }

    #[test]
    fn empty_and_parse() {
        let e = Tensor::new(vec![0, 2], vec![]).unwrap();
        assert!(Metric::Mse.evaluate(&e, &e).is_err());
        assert_eq!("delta:0.02".parse::<Metric>().unwrap(), Metric::DeltaRelative(0.02));
        assert_eq!("threshold:3".parse::<Metric>().unwrap(), Metric::ThresholdAccuracy(3.0));
        assert!("threshold:-1".parse::<Metric>().is_err());
        assert!("nope".parse::<Metric>().is_err());
    }
}
