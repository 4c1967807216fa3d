//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Overrides `config.lr` for the next step when set (schedules).
    pub lr: f64,
    step: u64,
    first: HashMap<String, Vec<f64>>,
    second: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            lr: config.lr,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that holds a gradient:
    /// `p -= lr*wd*p`, then the bias-corrected Adam step. Parameters without
    /// a gradient are left alone. Any non-finite gradient aborts the step
    /// before anything changes.
    pub fn step(&mut self, model: &mut dyn Module) -> Result<()> {
        let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
        let mut bad: Option<String> = None;
        model.visit("", &mut |name, t| {
            if let Some(g) = t.grad() {
                if bad.is_none() && g.iter().any(|v| !v.is_finite()) {
                    bad = Some(name.to_string());
                }
                grads.insert(name.to_string(), g);
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter '{name}' at step {}",
                self.step + 1
            )));
        }

        self.step += 1;
        let t = self.step as f64;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let lr = self.lr;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let (first, second) = (&mut self.first, &mut self.second);
        let mut failure = None;
        model.visit_mut("", &mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            let m = first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let mut values = p.to_vec();
            for i in 0..values.len() {
                values[i] -= lr * weight_decay * values[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            match Tensor::param(p.shape(), values) {
                Ok(next) => *p = next,
                Err(e) => failure = Some(e),
            }
        });
        failure.map_or(Ok(()), Err)
    }
}

/// Clears every parameter gradient.
pub fn zero_grad(model: &dyn Module) {
    model.visit("", &mut |_, t| t.zero_grad());
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm(model: &dyn Module) -> f64 {
    let mut sq = 0.0;
    model.visit("", &mut |_, t| {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    });
    sq.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(model: &dyn Module, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(model);
    if norm <= max_norm || norm == 0.0 {
        return Ok(norm);
    }
    let scale = max_norm / norm;
    model.visit("", &mut |_, p| {
        if let Some(g) = p.grad() {
            p.set_grad(Some(g.into_iter().map(|v| v * scale).collect()));
        }
    });
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::join;

    struct Scalar(Tensor);

    impl Module for Scalar {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
            f(&join(prefix, "w"), &self.0);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f(&join(prefix, "w"), &mut self.0);
        }
    }

    fn with_grad(value: f64, grad: f64) -> Scalar {
        let p = Tensor::param(&[1], vec![value]).unwrap();
        p.scale(grad).sum_all().backward().unwrap();
        Scalar(p)
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut m = with_grad(1.5, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step(&mut m).unwrap();
        assert_eq!(m.0.item(), 1.5);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn decay_only_shrinks_exponentially() {
        let mut m = with_grad(2.0, 0.0);
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut m).unwrap();
        assert_eq!(m.0.item(), 2.0 * (1.0 - 0.01 * 0.1));
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut m = with_grad(1.0, f64::NAN);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut m).unwrap_err().to_string();
        assert!(err.contains("'w'"), "{err}");
        assert_eq!(m.0.item(), 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let m = with_grad(0.0, 10.0);
        let before = clip_grad_norm(&m, 1.0).unwrap();
        assert_eq!(before, 10.0);
        assert!((grad_norm(&m) - 1.0).abs() < 1e-12);
    }
}
