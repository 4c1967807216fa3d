//! Building blocks shared by the model: linear maps, layer norm, the
//! feed-forward sublayer, and the forward-pass context that carries the
//! training flag and dropout stream.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Walks parameters in a fixed order with dotted names.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
        }
    }
}

/// Training flag plus the dropout stream for one forward pass.
pub struct ForwardCtx {
    pub training: bool,
    pub dropout: f64,
    rng: Rng,
}

impl ForwardCtx {
    pub fn train(dropout: f64, rng: Rng) -> Self {
        Self {
            training: true,
            dropout,
            rng,
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            dropout: 0.0,
            rng: Rng::new(0),
        }
    }

    pub fn drop(&mut self, x: &Tensor) -> Result<Tensor> {
        x.dropout(self.dropout, &mut self.rng, self.training)
    }
}

/// `x @ weight + bias`, weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(fan_in)`, bias zero.
    pub fn new(fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Self {
            weight: Tensor::param(&[fan_in, fan_out], w).expect("linear shape"),
            bias: bias.then(|| Tensor::param(&[fan_out], vec![0.0; fan_out]).expect("bias shape")),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self {
            gamma: Tensor::param(&[dim], vec![1.0; dim]).expect("ln shape"),
            beta: Tensor::param(&[dim], vec![0.0; dim]).expect("ln shape"),
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm_lastdim(&self.gamma, &self.beta, self.eps)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// `d -> hidden -> d` with an activation in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, activation: Activation, rng: &mut Rng) -> Self {
        Self {
            up: Linear::new(dim, hidden, true, rng),
            down: Linear::new(hidden, dim, true, rng),
            activation,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.activation.apply(&self.up.forward(x)?);
        self.down.forward(&h)
    }
}

impl Module for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

/// Total scalar parameters reachable from `m`.
pub fn count_params(m: &dyn Module) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| n += t.numel());
    n
}
