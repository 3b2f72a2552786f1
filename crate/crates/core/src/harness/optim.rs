//! Stochastic gradient descent with classical momentum and decoupled weight
//! decay.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid(format!("weight decay must be nonnegative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// `v ← μv + g; p ← p − lr·(v + wd·p)`, for every parameter in order.
///
/// All gradients are checked before anything is modified, so a rejected
/// step leaves both parameters and velocity untouched.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], cfg: &SgdConfig, velocity: &mut [Tensor]) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(invalid("parameter, gradient and velocity counts differ"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != velocity[i].shape() {
            return Err(shape_mismatch("sgd_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            let bad = g.data().iter().filter(|v| !v.is_finite()).count();
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} (shape {:?}) has {bad} non-finite entries",
                g.shape()
            )));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = cfg.momentum * *vv + gv;
            *pv -= cfg.lr * (*vv + cfg.weight_decay * *pv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = vec![Tensor::new(&[2], vec![1.0, -2.0]).unwrap()];
        let mut v = vec![Tensor::zeros(&[2])];
        let cfg = SgdConfig::default();
        sgd_step(&mut p, &[Tensor::zeros(&[2])], &cfg, &mut v).unwrap();
        let f = 1.0 - cfg.lr * cfg.weight_decay;
        assert_eq!(p[0].data(), &[f, -2.0 * f]);
    }

    #[test]
    fn no_momentum_is_plain_descent() {
        let mut p = vec![Tensor::new(&[1], vec![3.0]).unwrap()];
        let mut v = vec![Tensor::zeros(&[1])];
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut p, &[Tensor::new(&[1], vec![2.0]).unwrap()], &cfg, &mut v).unwrap();
        assert!((p[0].data()[0] - 2.8).abs() < 1e-15);
    }

    #[test]
    fn two_step_unrolled() {
        let cfg = SgdConfig { lr: 0.05, momentum: 0.9, weight_decay: 1e-3 };
        let (p0, g1, g2) = (0.7, 0.3, -0.4);
        let v1 = g1;
        let p1 = p0 - cfg.lr * (v1 + cfg.weight_decay * p0);
        let v2 = 0.9 * v1 + g2;
        let p2 = p1 - cfg.lr * (v2 + cfg.weight_decay * p1);
        let mut p = vec![Tensor::new(&[1], vec![p0]).unwrap()];
        let mut v = vec![Tensor::zeros(&[1])];
        sgd_step(&mut p, &[Tensor::new(&[1], vec![g1]).unwrap()], &cfg, &mut v).unwrap();
        sgd_step(&mut p, &[Tensor::new(&[1], vec![g2]).unwrap()], &cfg, &mut v).unwrap();
        assert!((p[0].data()[0] - p2).abs() < 1e-12);
        assert!((v[0].data()[0] - v2).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_rejected_without_update() {
        let mut p = vec![Tensor::new(&[2], vec![1.0, 1.0]).unwrap()];
        let mut v = vec![Tensor::zeros(&[2])];
        let g = Tensor::new(&[2], vec![0.1, f64::NAN]).unwrap_or_else(|_| {
            let mut t = Tensor::zeros(&[2]);
            t.data_mut()[1] = f64::NAN;
            t
        });
        assert!(sgd_step(&mut p, &[g], &SgdConfig::default(), &mut v).is_err());
        assert_eq!(p[0].data(), &[1.0, 1.0]);
        assert!(SgdConfig { momentum: 1.0, ..SgdConfig::default() }.validate().is_err());
    }
}
