//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function (under `no_grad`), so
//! it is an independent oracle for the reverse-mode rules it validates.

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub index: usize,
    pub shape: Vec<usize>,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`, 0 when both vanish.
    pub rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h` for every element of every input.
///
/// `inputs` are treated as leaves: the check builds fresh parameter copies, so
/// callers may pass constants.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(Tensor::to_param).collect();
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(Error::shape("gradcheck", "objective must be scalar"));
    }
    loss.backward()?;

    let mut tensors = Vec::with_capacity(inputs.len());
    for (ti, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let base = leaf.to_vec();
        let mut numeric = vec![0.0; base.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[e] += delta;
                let shifted = Tensor::new(leaf.shape(), v)?;
                let args: Vec<Tensor> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == ti { shifted.clone() } else { t.detach() })
                    .collect();
                no_grad(|| f(&args)).map(|t| t.item())
            };
            *slot = (eval(h)? - eval(-h)?) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel_err = if denom == 0.0 { 0.0 } else { diff / denom };
        let max_abs_err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        tensors.push(TensorCheck {
            index: ti,
            shape: leaf.shape().to_vec(),
            rel_err,
            max_abs_err,
        });
    }
    Ok(GradCheckReport { tensors })
}

/// Deterministic projection weights for turning a tensor output into a scalar
/// objective with non-trivial gradients.
pub fn probe_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = crate::rng::Rng::new(seed);
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// `sum(out * w)` for fixed weights `w`.
pub fn project(out: &Tensor, seed: u64) -> Result<Tensor> {
    let w = Tensor::new(out.shape(), probe_weights(out.numel(), seed))?;
    Ok(out.mul(&w)?.sum_all())
}
