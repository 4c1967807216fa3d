//! Multi-patch attention and the classic multi-head baseline.
//!
//! Both operate on `[.., B, L, d_model]` inputs where every leading index
//! (including the slice axis `B`) is an independent attention problem over
//! the `L` axis. Multi-patch attention applies one shared set of full-width
//! projections to every slice and scales scores by `sqrt(d_model)`; the
//! multi-head variant splits each projection into `h` heads of width
//! `d_model / h` and scales by `sqrt(d_h)`.
//!
//! In the encoder the slices are patches and attention runs across channels
//! (`[.., N, C, d]`, weights `[.., N, C, C]`). In the decoder the slices are
//! channels and attention runs causally across patches (`[.., C, N, d]`,
//! weights `[.., C, N, N]`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{join, ForwardCtx, Module};
use crate::rng::Rng;
use crate::tensor::{causal_mask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttnMask {
    #[default]
    None,
    /// Query `i` sees keys `j <= i` only.
    Causal,
}

#[derive(Debug, Clone)]
pub struct AttnOutput {
    pub output: Tensor,
    /// Post-softmax, pre-dropout weights. `[.., B, Lq, Lk]` for multi-patch,
    /// `[.., B, h, Lq, Lk]` for multi-head.
    pub weights: Tensor,
}

fn square_matrix(d: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (d as f64).sqrt();
    let w: Vec<f64> = (0..d * d).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::param(&[d, d], w).expect("projection shape")
}

fn check_inputs(q_in: &Tensor, kv_in: &Tensor, d: usize, mask: AttnMask) -> Result<()> {
    if q_in.ndim() < 2 || kv_in.ndim() != q_in.ndim() {
        return Err(Error::shape(
            "attention",
            format!("query {:?} and key/value {:?} must share rank >= 2", q_in.shape(), kv_in.shape()),
        ));
    }
    let nd = q_in.ndim();
    if q_in.shape()[..nd - 2] != kv_in.shape()[..nd - 2] {
        return Err(Error::shape(
            "attention",
            format!("slice axes differ: {:?} vs {:?}", q_in.shape(), kv_in.shape()),
        ));
    }
    if q_in.shape()[nd - 1] != d || kv_in.shape()[nd - 1] != d {
        return Err(Error::shape(
            "attention",
            format!("model width {d} expected, got {:?} / {:?}", q_in.shape(), kv_in.shape()),
        ));
    }
    if mask == AttnMask::Causal && q_in.shape()[nd - 2] != kv_in.shape()[nd - 2] {
        return Err(Error::InvalidArgument(format!(
            "causal mask needs equal query and key lengths, got {} and {}",
            q_in.shape()[nd - 2],
            kv_in.shape()[nd - 2]
        )));
    }
    Ok(())
}

/// Shared Q/K/V projections applied to every slice, with an optional output
/// projection.
#[derive(Debug, Clone)]
pub struct MultiPatchAttention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Option<Tensor>,
}

impl MultiPatchAttention {
    pub fn new(d_model: usize, output_projection: bool, rng: &mut Rng) -> Self {
        Self {
            wq: square_matrix(d_model, rng),
            wk: square_matrix(d_model, rng),
            wv: square_matrix(d_model, rng),
            wo: output_projection.then(|| square_matrix(d_model, rng)),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn forward(
        &self,
        q_in: &Tensor,
        kv_in: &Tensor,
        mask: AttnMask,
        ctx: &mut ForwardCtx,
    ) -> Result<AttnOutput> {
        let d = self.d_model();
        check_inputs(q_in, kv_in, d, mask)?;
        let q = q_in.matmul(&self.wq)?;
        let k = kv_in.matmul(&self.wk)?;
        let v = kv_in.matmul(&self.wv)?;
        let mut scores = q.matmul(&k.transpose_last2()?)?.scale(1.0 / (d as f64).sqrt());
        if mask == AttnMask::Causal {
            scores = scores.add(&causal_mask(q_in.shape()[q_in.ndim() - 2]))?;
        }
        let weights = scores.softmax_lastdim()?;
        let mixed = ctx.drop(&weights)?.matmul(&v)?;
        let output = match &self.wo {
            Some(wo) => mixed.matmul(wo)?,
            None => mixed,
        };
        Ok(AttnOutput { output, weights })
    }
}

impl Module for MultiPatchAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "wq"), &self.wq);
        f(&join(prefix, "wk"), &self.wk);
        f(&join(prefix, "wv"), &self.wv);
        if let Some(wo) = &self.wo {
            f(&join(prefix, "wo"), wo);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        if let Some(wo) = &mut self.wo {
            f(&join(prefix, "wo"), wo);
        }
    }
}

/// Classic multi-head attention. Head `i` owns columns `i*d_h .. (i+1)*d_h`
/// of each `d_model x d_model` projection, i.e. the per-head `W_i` matrices
/// stored side by side. `wo` maps the concatenated heads back to `d_model`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            wq: square_matrix(d_model, rng),
            wk: square_matrix(d_model, rng),
            wv: square_matrix(d_model, rng),
            wo: square_matrix(d_model, rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }

    /// `[.., L, d] -> [.., h, L, d_h]`
    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let nd = x.ndim();
        let mut shape = x.shape()[..nd - 1].to_vec();
        shape.extend([self.heads, self.head_dim()]);
        let split = x.reshape(&shape)?;
        let mut order: Vec<usize> = (0..nd - 2).collect();
        order.extend([nd - 1, nd - 2, nd]);
        split.permute_axes(&order)
    }

    /// `[.., h, L, d_h] -> [.., L, d]`
    fn merge_heads(&self, x: &Tensor) -> Result<Tensor> {
        let nd = x.ndim();
        let mut order: Vec<usize> = (0..nd - 3).collect();
        order.extend([nd - 2, nd - 3, nd - 1]);
        let merged = x.permute_axes(&order)?;
        let mut shape = merged.shape()[..nd - 2].to_vec();
        shape.push(self.d_model());
        merged.reshape(&shape)
    }

    pub fn forward(
        &self,
        q_in: &Tensor,
        kv_in: &Tensor,
        mask: AttnMask,
        ctx: &mut ForwardCtx,
    ) -> Result<AttnOutput> {
        check_inputs(q_in, kv_in, self.d_model(), mask)?;
        let q = self.split_heads(&q_in.matmul(&self.wq)?)?;
        let k = self.split_heads(&kv_in.matmul(&self.wk)?)?;
        let v = self.split_heads(&kv_in.matmul(&self.wv)?)?;
        let mut scores = q
            .matmul(&k.transpose_last2()?)?
            .scale(1.0 / (self.head_dim() as f64).sqrt());
        if mask == AttnMask::Causal {
            scores = scores.add(&causal_mask(q_in.shape()[q_in.ndim() - 2]))?;
        }
        let weights = scores.softmax_lastdim()?;
        let heads = ctx.drop(&weights)?.matmul(&v)?;
        let output = self.merge_heads(&heads)?.matmul(&self.wo)?;
        Ok(AttnOutput { output, weights })
    }
}

impl Module for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "wq"), &self.wq);
        f(&join(prefix, "wk"), &self.wk);
        f(&join(prefix, "wv"), &self.wv);
        f(&join(prefix, "wo"), &self.wo);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "wo"), &mut self.wo);
    }
}

/// Either attention flavour behind one interface.
#[derive(Debug, Clone)]
pub enum AttentionLayer {
    MultiPatch(MultiPatchAttention),
    MultiHead(MultiHeadAttention),
}

impl AttentionLayer {
    pub fn forward(
        &self,
        q_in: &Tensor,
        kv_in: &Tensor,
        mask: AttnMask,
        ctx: &mut ForwardCtx,
    ) -> Result<AttnOutput> {
        match self {
            AttentionLayer::MultiPatch(a) => a.forward(q_in, kv_in, mask, ctx),
            AttentionLayer::MultiHead(a) => a.forward(q_in, kv_in, mask, ctx),
        }
    }
}

impl Module for AttentionLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            AttentionLayer::MultiPatch(a) => a.visit(prefix, f),
            AttentionLayer::MultiHead(a) => a.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            AttentionLayer::MultiPatch(a) => a.visit_mut(prefix, f),
            AttentionLayer::MultiHead(a) => a.visit_mut(prefix, f),
        }
    }
}

/// Encoder attention: input `[.., N, C, d]`, one unmasked problem per patch
/// across channels. Weights come back as `[.., N, C, C]`.
pub fn encoder_channel_attention(
    layer: &AttentionLayer,
    x: &Tensor,
    ctx: &mut ForwardCtx,
) -> Result<AttnOutput> {
    layer.forward(x, x, AttnMask::None, ctx)
}

/// Decoder self-attention: input `[.., C, N, d]`, one problem per channel
/// across patches, causal by default. Weights `[.., C, N, N]`.
pub fn decoder_temporal_attention(
    layer: &AttentionLayer,
    x: &Tensor,
    causal: bool,
    ctx: &mut ForwardCtx,
) -> Result<AttnOutput> {
    let mask = if causal { AttnMask::Causal } else { AttnMask::None };
    layer.forward(x, x, mask, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::count_params;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn weight_shapes_follow_slicing() {
        let mut rng = Rng::new(0);
        let layer = AttentionLayer::MultiPatch(MultiPatchAttention::new(8, true, &mut rng));
        let mut ctx = ForwardCtx::eval();
        let enc = encoder_channel_attention(&layer, &rand_tensor(&[11, 7, 8], 1), &mut ctx).unwrap();
        assert_eq!(enc.weights.shape(), &[11, 7, 7]);
        assert_eq!(enc.output.shape(), &[11, 7, 8]);
        let dec = decoder_temporal_attention(&layer, &rand_tensor(&[7, 11, 8], 2), true, &mut ctx).unwrap();
        assert_eq!(dec.weights.shape(), &[7, 11, 11]);
    }

    #[test]
    fn causal_rows_have_prefix_support() {
        let mut rng = Rng::new(3);
        let layer = AttentionLayer::MultiPatch(MultiPatchAttention::new(4, true, &mut rng));
        let out = decoder_temporal_attention(&layer, &rand_tensor(&[2, 5, 4], 4), true, &mut ForwardCtx::eval()).unwrap();
        for c in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    let w = out.weights.at(&[c, i, j]);
                    if j > i {
                        assert_eq!(w, 0.0);
                    } else {
                        assert!(w > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn singleton_channel_weights_are_one() {
        let mut rng = Rng::new(5);
        let layer = AttentionLayer::MultiPatch(MultiPatchAttention::new(4, true, &mut rng));
        let out = encoder_channel_attention(&layer, &rand_tensor(&[3, 1, 4], 6), &mut ForwardCtx::eval()).unwrap();
        assert!(out.weights.data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn causal_needs_square_geometry() {
        let mut rng = Rng::new(7);
        let a = MultiPatchAttention::new(4, true, &mut rng);
        let q = rand_tensor(&[1, 3, 4], 8);
        let kv = rand_tensor(&[1, 5, 4], 9);
        assert!(a.forward(&q, &kv, AttnMask::Causal, &mut ForwardCtx::eval()).is_err());
        assert!(a.forward(&q, &kv, AttnMask::None, &mut ForwardCtx::eval()).is_ok());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = Rng::new(0);
        assert!(MultiHeadAttention::new(10, 4, &mut rng).is_err());
    }

    #[test]
    fn multi_head_rows_sum_to_one() {
        let mut rng = Rng::new(10);
        let a = MultiHeadAttention::new(8, 2, &mut rng).unwrap();
        let x = rand_tensor(&[4, 8], 11);
        let out = a.forward(&x, &x, AttnMask::None, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(out.weights.shape(), &[2, 4, 4]);
        for row in out.weights.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_parity() {
        let mut rng = Rng::new(0);
        for d in [8, 16, 64] {
            let mp = MultiPatchAttention::new(d, true, &mut rng);
            let mh = MultiHeadAttention::new(d, 4, &mut rng).unwrap();
            assert_eq!(count_params(&mp), 4 * d * d);
            assert_eq!(count_params(&mp), count_params(&mh));
        }
    }

    #[test]
    fn uniform_scores_average_values() {
        // Zero query projection -> uniform scores; identity value projection.
        let d = 3;
        let eye: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let a = MultiPatchAttention {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::new(&[d, d], eye.clone()).unwrap(),
            wv: Tensor::new(&[d, d], eye.clone()).unwrap(),
            wo: None,
        };
        let x = Tensor::new(&[3, 3], eye).unwrap();
        let out = a.forward(&x, &x, AttnMask::None, &mut ForwardCtx::eval()).unwrap();
        for &v in out.output.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
