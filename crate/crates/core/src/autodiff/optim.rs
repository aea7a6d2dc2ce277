use std::collections::BTreeMap;

use crate::autodiff::param::Parameter;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v ← g + μ·v`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: BTreeMap<usize, Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be > 0, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies one update. Nothing is mutated if any gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut Parameter>) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient { param: p.id() });
        }
        for p in params {
            let n = p.value.len();
            let v = self.velocity.entry(p.id()).or_insert_with(|| vec![0.0; n]);
            let grad = p.grad.data();
            for ((w, vel), &g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = g + self.momentum * *vel;
                *w -= self.learning_rate * *vel;
            }
        }
        Ok(())
    }

    /// Drops the velocity of weight `i` in parameter `id`, so a frozen
    /// weight carries no stale momentum.
    pub fn clear_velocity(&mut self, id: usize, i: usize) {
        if let Some(v) = self.velocity.get_mut(&id) {
            v[i] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(w: f64, g: f64) -> Parameter {
        let mut p = Parameter::new(7, Tensor::from_vec(vec![w]));
        p.grad.data_mut()[0] = g;
        p
    }

    #[test]
    fn plain_step() {
        let mut p = param(1.0, 1.0);
        Sgd::new(0.1, 0.0).unwrap().step(vec![&mut p]).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_no_change() {
        let mut p = param(0.37, 0.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(vec![&mut p]).unwrap();
        opt.step(vec![&mut p]).unwrap();
        assert_eq!(p.value.data()[0], 0.37);
    }

    #[test]
    fn momentum_two_steps() {
        let mut p = param(0.0, 1.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(vec![&mut p]).unwrap();
        assert!((p.value.data()[0] + 0.1).abs() < 1e-15);
        opt.step(vec![&mut p]).unwrap();
        assert!((p.value.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn non_finite_rejected_before_mutation() {
        let mut a = param(1.0, 1.0);
        let mut b = param(2.0, f64::NAN);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        assert!(opt.step(vec![&mut a, &mut b]).is_err());
        assert_eq!(a.value.data()[0], 1.0);
    }

    #[test]
    fn bad_hyperparameters() {
        assert!(Sgd::new(0.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0).is_err());
        assert!(Sgd::new(0.1, -0.1).is_err());
    }
}
