//! Adam with bias-corrected moments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::model::Params;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.raw_dim())))
                .collect()
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update at learning rate `lr`. Parameters without a gradient keep
    /// their value and moments.
    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let (Some(p), Some(m), Some(v)) = (params.tensors.get_mut(name), self.m.get_mut(name), self.v.get_mut(name))
            else {
                return Err(Error::InvalidArgument(format!("gradient for unknown parameter {name}")));
            };
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for {name}")));
            }
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn one(v: f64) -> Params {
        let mut tensors = BTreeMap::new();
        tensors.insert("x".to_string(), Tensor::from_elem(IxDyn(&[1]), v));
        Params { tensors }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), Tensor::from_elem(IxDyn(&[1]), 3.0));
        opt.update(&mut p, &g, 0.01).unwrap();
        // bias-corrected first step is lr·sign(g) up to eps
        assert!((p.tensors["x"][[0]] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = one(5.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..2000 {
            let x = p.tensors["x"][[0]];
            let mut g = BTreeMap::new();
            g.insert("x".to_string(), Tensor::from_elem(IxDyn(&[1]), 2.0 * (x - 2.0)));
            opt.update(&mut p, &g, 0.05).unwrap();
        }
        assert!((p.tensors["x"][[0]] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let mut p = one(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let mut g = BTreeMap::new();
        g.insert("y".to_string(), Tensor::zeros(IxDyn(&[1])));
        assert!(opt.update(&mut p, &g, 0.1).is_err());
    }
}
