//! Reversible instance normalisation, patching and patch embedding: the path
//! from a raw window `[.., L, C]` to embedded patches `[.., C, N, d_model]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, Activation, Linear, Module};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const REVIN_EPS: f64 = 1e-5;
const GAMMA_GUARD: f64 = 1e-12;

/// Learnable per-channel affine of reversible instance normalisation.
#[derive(Debug, Clone)]
pub struct RevIn {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

/// Statistics of one normalised instance, kept for the inverse transform.
/// Shapes are `[.., 1, C]`; both are constants in the graph.
#[derive(Debug, Clone)]
pub struct RevInState {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl RevIn {
    pub fn new(channels: usize, eps: f64) -> Self {
        Self {
            gamma: Tensor::param(&[channels], vec![1.0; channels]).expect("revin shape"),
            beta: Tensor::param(&[channels], vec![0.0; channels]).expect("revin shape"),
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Standardises each channel over the time axis (`-2`) with its own mean
    /// and biased std (floored at `eps`), then applies `gamma`, `beta`.
    pub fn normalize(&self, x: &Tensor) -> Result<(Tensor, RevInState)> {
        if x.ndim() < 2 {
            return Err(Error::shape("revin_normalize", format!("need [.., L, C], got {:?}", x.shape())));
        }
        let (l, c) = (x.shape()[x.ndim() - 2], x.shape()[x.ndim() - 1]);
        if c != self.channels() {
            return Err(Error::shape(
                "revin_normalize",
                format!("input has {c} channels, affine has {}", self.channels()),
            ));
        }
        if l < 2 {
            return Err(Error::InvalidArgument(format!(
                "revin_normalize needs at least 2 time steps, got {l}"
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("revin eps must be positive".into()));
        }
        let xd = x.detach();
        let mu = xd.mean_axis(-2, true)?;
        let sigma = xd.var_axis(-2, true)?.sqrt()?.clamp_min(self.eps);
        let y = x.sub(&mu)?.div(&sigma)?.mul(&self.gamma)?.add(&self.beta)?;
        Ok((y, RevInState { mu, sigma }))
    }

    /// `(y - beta) / gamma * sigma + mu`.
    pub fn denormalize(&self, y: &Tensor, state: &RevInState) -> Result<Tensor> {
        if let Some(g) = self.gamma.data().iter().find(|g| g.abs() < GAMMA_GUARD) {
            return Err(Error::Numeric(format!(
                "revin gamma {g:e} too close to zero to invert"
            )));
        }
        y.sub(&self.beta)?
            .div(&self.gamma)?
            .mul(&state.sigma)?
            .add(&state.mu)
    }
}

impl Module for RevIn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Patching geometry: patch length, stride and resulting patch count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_len: usize,
    pub stride: usize,
    pub num_patches: usize,
    /// Repeat the last value `stride` times before patching.
    pub pad_end: bool,
}

impl PatchGrid {
    /// `N = floor((L - P) / S) + 1`, trailing steps past the last full patch
    /// are dropped.
    pub fn new(lookback: usize, patch_len: usize, stride: usize) -> Result<Self> {
        Self::with_padding(lookback, patch_len, stride, false)
    }

    pub fn with_padding(lookback: usize, patch_len: usize, stride: usize, pad_end: bool) -> Result<Self> {
        if patch_len == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "patch length ({patch_len}) and stride ({stride}) must be positive"
            )));
        }
        if patch_len > lookback {
            return Err(Error::InvalidArgument(format!(
                "patch length {patch_len} exceeds lookback {lookback}; shrink the patch length or pad the series upstream"
            )));
        }
        let span = if pad_end { lookback + stride } else { lookback };
        Ok(Self {
            patch_len,
            stride,
            num_patches: (span - patch_len) / stride + 1,
            pad_end,
        })
    }

    /// Time indices covered by patch `n`, clamped to `lookback - 1` when padding.
    pub fn window(&self, n: usize, lookback: usize) -> impl Iterator<Item = usize> {
        let start = n * self.stride;
        (start..start + self.patch_len).map(move |t| t.min(lookback - 1))
    }
}

/// `[.., L, C] -> [.., C, N, P]`: patch `n` of channel `c` is
/// `x[n*S .. n*S + P, c]`.
pub fn make_patches(x: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    if x.ndim() < 2 {
        return Err(Error::shape("make_patches", format!("need [.., L, C], got {:?}", x.shape())));
    }
    let nd = x.ndim();
    let (l, c) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    if grid.patch_len > l {
        return Err(Error::InvalidArgument(format!(
            "patch length {} exceeds series length {l}; shrink the patch length or pad the series upstream",
            grid.patch_len
        )));
    }
    let expected = PatchGrid::with_padding(l, grid.patch_len, grid.stride, grid.pad_end)?;
    if expected.num_patches != grid.num_patches {
        return Err(Error::shape(
            "make_patches",
            format!(
                "grid built for {} patches but series of length {l} yields {}",
                grid.num_patches, expected.num_patches
            ),
        ));
    }
    let lead: Vec<usize> = x.shape()[..nd - 2].to_vec();
    let batch: usize = lead.iter().product();
    let (n, p) = (grid.num_patches, grid.patch_len);
    let mut index = Vec::with_capacity(batch * c * n * p);
    for b in 0..batch {
        for ch in 0..c {
            for pi in 0..n {
                for t in grid.window(pi, l) {
                    index.push(b * l * c + t * c + ch);
                }
            }
        }
    }
    let mut shape = lead;
    shape.extend([c, n, p]);
    x.gather(&shape, index)
}

/// Patch embedding MLP `P -> d_model -> d_model`, shared across every
/// (channel, patch) pair.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub hidden: Linear,
    pub out: Linear,
    pub activation: Activation,
}

impl Embedder {
    pub fn new(patch_len: usize, d_model: usize, activation: Activation, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new(patch_len, d_model, true, rng),
            out: Linear::new(d_model, d_model, true, rng),
            activation,
        }
    }

    pub fn forward(&self, patches: &Tensor) -> Result<Tensor> {
        let p = self.hidden.fan_in();
        if patches.shape().last() != Some(&p) {
            return Err(Error::shape(
                "embed",
                format!("last axis must be the patch length {p}, got {:?}", patches.shape()),
            ));
        }
        let h = self.activation.apply(&self.hidden.forward(patches)?);
        self.out.forward(&h)
    }
}

impl Module for Embedder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}
