//! SGD with momentum and an exponential learning-rate schedule.

use std::collections::BTreeMap;

use super::NetParams;
use crate::error::{Error, Result};

/// `lr0 * gamma^epoch`.
pub fn lr_at(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}

/// Heavy-ball SGD: `v = m v + g; p -= lr v`. Velocities are keyed by tensor name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies the stored gradients of every unfrozen tensor. A tensor without a
    /// gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut NetParams, lr: f64) -> Result<()> {
        for (name, t) in &params.tensors {
            if params.frozen.contains(name) {
                continue;
            }
            if let Some(g) = &t.grad {
                if g.len() != t.data.len() {
                    return Err(Error::Tensor(format!("gradient of {name} has wrong length")));
                }
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Diverged(format!("non-finite gradient in {name}[{bad}]")));
                }
            }
        }
        let m = self.momentum as f32;
        let lr = lr as f32;
        for (name, t) in params.tensors.iter_mut() {
            if params.frozen.contains(name) {
                continue;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; t.data.len()]);
            if v.len() != t.data.len() {
                *v = vec![0.0; t.data.len()];
            }
            match &t.grad {
                Some(g) => {
                    for ((vi, gi), p) in v.iter_mut().zip(g).zip(t.data.iter_mut()) {
                        *vi = m * *vi + *gi;
                        *p -= lr * *vi;
                    }
                }
                None => {
                    for (vi, p) in v.iter_mut().zip(t.data.iter_mut()) {
                        *vi *= m;
                        *p -= lr * *vi;
                    }
                }
            }
        }
        if !params.all_finite() {
            return Err(Error::Diverged("non-finite parameter after step".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Tensor;

    fn scalar_param(g: Option<f32>) -> NetParams {
        let mut p = NetParams::default();
        let mut t = Tensor::new(vec![1], vec![0.0]).unwrap();
        t.grad = g.map(|g| vec![g]);
        p.insert("w", t);
        p
    }

    #[test]
    fn plain_step() {
        let mut p = scalar_param(Some(1.0));
        Sgd::new(0.0).step(&mut p, 0.1).unwrap();
        assert!((p.get("w").unwrap().data[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn two_momentum_steps() {
        let mut p = scalar_param(Some(1.0));
        let mut opt = Sgd::new(0.98);
        opt.step(&mut p, 1.0).unwrap();
        opt.step(&mut p, 1.0).unwrap();
        assert!((p.get("w").unwrap().data[0] + 2.98).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_decays_velocity_only() {
        let mut p = scalar_param(Some(0.0));
        let mut opt = Sgd::new(0.5);
        opt.step(&mut p, 1.0).unwrap();
        assert_eq!(p.get("w").unwrap().data[0], 0.0);
        opt.velocity.insert("w".into(), vec![2.0]);
        opt.step(&mut p, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data[0], 0.0);
        assert_eq!(opt.velocity["w"], vec![1.0]);
    }

    #[test]
    fn frozen_untouched_and_nan_rejected() {
        let mut p = scalar_param(Some(1.0));
        p.freeze("w");
        Sgd::new(0.9).step(&mut p, 1.0).unwrap();
        assert_eq!(p.get("w").unwrap().data[0], 0.0);
        let mut p = scalar_param(Some(f32::NAN));
        assert!(matches!(Sgd::new(0.9).step(&mut p, 1.0), Err(Error::Diverged(_))));
        assert_eq!(p.get("w").unwrap().data[0], 0.0);
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at(1e-3, 0.95, 0), 1e-3);
        assert!((lr_at(1e-3, 0.95, 2) - 1e-3 * 0.9025).abs() < 1e-15);
    }
}
