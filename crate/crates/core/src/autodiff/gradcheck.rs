//! Central finite differences, used to check [`Model::backward`].

use crate::autodiff::loss::Loss;
use crate::autodiff::model::{ForwardMode, Model};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// `(E(w+ε) − E(w−ε)) / 2ε` for every entry of every parameter, in
/// [`Model::parameters`] order. Only forward passes are used.
pub fn finite_diff_grad(
    model: &Model,
    loss: Loss,
    input: &Tensor,
    target: &Tensor,
    epsilon: f64,
    mode: ForwardMode,
) -> Result<Vec<Tensor>> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
    }
    // (parameter index, entry index) for every scalar
    let shapes: Vec<Vec<usize>> = model
        .parameters()
        .iter()
        .map(|p| p.value.shape().to_vec())
        .collect();
    let coords: Vec<(usize, usize)> = shapes
        .iter()
        .enumerate()
        .flat_map(|(p, s)| (0..s.iter().product()).map(move |i| (p, i)))
        .collect();
    let estimates = exec::map_indexed(coords.len(), |k| -> Result<f64> {
        let (p, i) = coords[k];
        let mut m = model.clone();
        let orig = m.parameters()[p].value.data()[i];
        m.parameters_mut()[p].value.data_mut()[i] = orig + epsilon;
        let plus = m.loss(loss, input, target, mode)?;
        m.parameters_mut()[p].value.data_mut()[i] = orig - epsilon;
        let minus = m.loss(loss, input, target, mode)?;
        Ok((plus - minus) / (2.0 * epsilon))
    });
    let mut it = estimates.into_iter();
    shapes
        .into_iter()
        .map(|s| {
            let n = s.iter().product();
            let data = it.by_ref().take(n).collect::<Result<Vec<_>>>()?;
            Tensor::new(s, data)
        })
        .collect()
}

/// Largest `|a − b| / max(|a|, |b|)` over all entries, skipping pairs whose
/// absolute difference is at most `abs_floor`.
pub fn max_relative_error(analytic: &[&Tensor], numeric: &[Tensor], abs_floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let diff = (x - y).abs();
            if diff <= abs_floor {
                continue;
            }
            worst = worst.max(diff / x.abs().max(y.abs()));
        }
    }
    worst
}
