//! The Sentinel network: RevIN, patching and embedding, a channel encoder
//! stack, a causal temporal decoder stack with cross-attention to the
//! encoder, a channel-shared flatten head and RevIN denormalisation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionLayer, AttnMask, MultiHeadAttention, MultiPatchAttention};
use crate::error::{Error, Result};
use crate::layers::{count_params, join, Activation, FeedForward, ForwardCtx, LayerNorm, Linear, Module};
use crate::preprocessing::{make_patches, Embedder, PatchGrid, RevIn, REVIN_EPS};
use crate::rng::Rng;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Architecture changes used by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Channel encoder + temporal decoder with multi-patch attention.
    #[default]
    Full,
    /// No encoder; the decoder's second attention reads its own stream.
    NoEncoder,
    /// No decoder; the encoder output feeds the head directly.
    NoDecoder,
    /// Encoder attends over patches (unmasked) instead of channels.
    TemporalEncoder,
    /// Multi-head attention everywhere in place of multi-patch attention.
    MultiheadBoth,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoEncoder,
        Variant::NoDecoder,
        Variant::TemporalEncoder,
        Variant::MultiheadBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEncoder => "no_encoder",
            Variant::NoDecoder => "no_decoder",
            Variant::TemporalEncoder => "temporal_encoder",
            Variant::MultiheadBoth => "multihead_both",
        }
    }

    fn has_encoder(self) -> bool {
        self != Variant::NoEncoder
    }

    fn has_decoder(self) -> bool {
        self != Variant::NoDecoder
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant '{s}'; valid: {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub dropout: f64,
    pub activation: Activation,
    /// Learnable per-patch-index embedding added after patch embedding.
    pub positional_embedding: bool,
    /// Keep the `W_O` projection after multi-patch attention.
    pub output_projection: bool,
    /// Apply the causal mask in decoder cross-attention too.
    pub cross_attn_causal: bool,
    /// Repeat the last value `stride` times before patching.
    pub pad_end: bool,
    /// Head count for multi-head attention (`multihead_both`).
    pub heads: usize,
    pub ffn_mult: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            channels: 7,
            d_model: 64,
            n_enc: 1,
            n_dec: 1,
            patch_len: 16,
            stride: 8,
            dropout: 0.3,
            activation: Activation::Gelu,
            positional_embedding: false,
            output_projection: true,
            cross_attn_causal: false,
            pad_end: false,
            heads: 4,
            ffn_mult: 4,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn patch_grid(&self) -> Result<PatchGrid> {
        PatchGrid::with_padding(self.lookback, self.patch_len, self.stride, self.pad_end)
    }

    pub fn num_patches(&self) -> Result<usize> {
        Ok(self.patch_grid()?.num_patches)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("patch_len", self.patch_len),
            ("stride", self.stride),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.n_enc == 0 && self.variant.has_encoder() {
            return Err(Error::Config("model.n_enc must be >= 1 unless variant is no_encoder".into()));
        }
        if self.n_dec == 0 && self.variant.has_decoder() {
            return Err(Error::Config("model.n_dec must be >= 1 unless variant is no_decoder".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout {} outside [0, 1)", self.dropout)));
        }
        if self.variant == Variant::MultiheadBoth && (self.heads == 0 || !self.d_model.is_multiple_of(self.heads)) {
            return Err(Error::Config(format!(
                "model.d_model {} not divisible by model.heads {}",
                self.d_model, self.heads
            )));
        }
        self.patch_grid().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: AttentionLayer,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    /// Pre-norm residual block over `[.., B, L, d]`, attention unmasked along `L`.
    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<(Tensor, Tensor)> {
        let h = self.norm_attn.forward(x)?;
        let a = self.attn.forward(&h, &h, AttnMask::None, ctx)?;
        let x = x.add(&ctx.drop(&a.output)?)?;
        let f = self.ffn.forward(&self.norm_ffn.forward(&x)?)?;
        Ok((x.add(&ctx.drop(&f)?)?, a.weights))
    }
}

impl Module for EncoderBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm_attn.visit(&join(prefix, "norm_attn"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm_ffn.visit(&join(prefix, "norm_ffn"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm_attn.visit_mut(&join(prefix, "norm_attn"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm_ffn.visit_mut(&join(prefix, "norm_ffn"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub norm_self: LayerNorm,
    pub self_attn: AttentionLayer,
    pub norm_cross: LayerNorm,
    pub cross_attn: AttentionLayer,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

struct DecoderWeights {
    self_attn: Tensor,
    cross_attn: Tensor,
}

impl DecoderBlock {
    /// `x` is `[.., C, N, d]`. Cross-attention reads `memory` when given,
    /// otherwise its own normalised stream.
    fn forward(
        &self,
        x: &Tensor,
        memory: Option<&Tensor>,
        cross_mask: AttnMask,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor, DecoderWeights)> {
        let h = self.norm_self.forward(x)?;
        let s = self.self_attn.forward(&h, &h, AttnMask::Causal, ctx)?;
        let x = x.add(&ctx.drop(&s.output)?)?;
        let q = self.norm_cross.forward(&x)?;
        let kv = memory.unwrap_or(&q);
        let c = self.cross_attn.forward(&q, kv, cross_mask, ctx)?;
        let x = x.add(&ctx.drop(&c.output)?)?;
        let f = self.ffn.forward(&self.norm_ffn.forward(&x)?)?;
        Ok((
            x.add(&ctx.drop(&f)?)?,
            DecoderWeights {
                self_attn: s.weights,
                cross_attn: c.weights,
            },
        ))
    }
}

impl Module for DecoderBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm_self.visit(&join(prefix, "norm_self"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.norm_cross.visit(&join(prefix, "norm_cross"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.norm_ffn.visit(&join(prefix, "norm_ffn"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm_self.visit_mut(&join(prefix, "norm_self"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm_cross.visit_mut(&join(prefix, "norm_cross"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.norm_ffn.visit_mut(&join(prefix, "norm_ffn"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// Intermediate tensors of one forward pass, for inspection and tests.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[.., C, N, P]`
    pub patches: Tensor,
    /// `[.., C, N, d]`
    pub embedded: Tensor,
    /// Per encoder block: `[.., N, C, C]` (or `[.., C, N, N]` for the
    /// temporal encoder, `[.., slices, h, L, L]` for multi-head).
    pub encoder_weights: Vec<Tensor>,
    /// Encoder output reshaped to `[.., C, N, d]`.
    pub encoder_output: Option<Tensor>,
    pub decoder_self_weights: Vec<Tensor>,
    pub decoder_cross_weights: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct SentinelModel {
    pub config: ModelConfig,
    pub grid: PatchGrid,
    pub revin: RevIn,
    pub embedder: Embedder,
    /// `[N, d]` when enabled.
    pub positional: Option<Tensor>,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderBlock>,
    /// `N * d -> T`, shared across channels.
    pub head: Linear,
}

fn attention_layer(cfg: &ModelConfig, rng: &mut Rng) -> Result<AttentionLayer> {
    Ok(match cfg.variant {
        Variant::MultiheadBoth => AttentionLayer::MultiHead(MultiHeadAttention::new(cfg.d_model, cfg.heads, rng)?),
        _ => AttentionLayer::MultiPatch(MultiPatchAttention::new(cfg.d_model, cfg.output_projection, rng)),
    })
}

/// Swap axes `-3` and `-2`: `[.., C, N, d] <-> [.., N, C, d]`.
fn swap_slice_axes(x: &Tensor) -> Result<Tensor> {
    let nd = x.ndim();
    let mut order: Vec<usize> = (0..nd).collect();
    order.swap(nd - 3, nd - 2);
    x.permute_axes(&order)
}

impl SentinelModel {
    /// Deterministic initialisation from `seed`: linear weights uniform in
    /// `±1/sqrt(fan_in)`, biases zero, norm and RevIN gains one, shifts zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed).derive(0);
        Self::init(config, &mut rng)
    }

    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let grid = config.patch_grid()?;
        let d = config.d_model;
        let n = grid.num_patches;
        let hidden = config.ffn_mult * d;
        let revin = RevIn::new(config.channels, REVIN_EPS);
        let embedder = Embedder::new(config.patch_len, d, config.activation, rng);
        let positional = if config.positional_embedding {
            let v: Vec<f64> = (0..n * d).map(|_| rng.uniform(-0.02, 0.02)).collect();
            Some(Tensor::param(&[n, d], v)?)
        } else {
            None
        };
        let encoder = if config.variant.has_encoder() {
            (0..config.n_enc)
                .map(|_| {
                    Ok(EncoderBlock {
                        norm_attn: LayerNorm::new(d, LN_EPS),
                        attn: attention_layer(&config, rng)?,
                        norm_ffn: LayerNorm::new(d, LN_EPS),
                        ffn: FeedForward::new(d, hidden, config.activation, rng),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let decoder = if config.variant.has_decoder() {
            (0..config.n_dec)
                .map(|_| {
                    Ok(DecoderBlock {
                        norm_self: LayerNorm::new(d, LN_EPS),
                        self_attn: attention_layer(&config, rng)?,
                        norm_cross: LayerNorm::new(d, LN_EPS),
                        cross_attn: attention_layer(&config, rng)?,
                        norm_ffn: LayerNorm::new(d, LN_EPS),
                        ffn: FeedForward::new(d, hidden, config.activation, rng),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let head = Linear::new(n * d, config.horizon, true, rng);
        Ok(Self {
            config,
            grid,
            revin,
            embedder,
            positional,
            encoder,
            decoder,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        count_params(self)
    }

    /// `(name, tensor)` for every parameter, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let nd = x.ndim();
        if nd != 2 && nd != 3 {
            return Err(Error::shape(
                "forward",
                format!("input must be [L, C] or [B, L, C], got {:?}", x.shape()),
            ));
        }
        let (l, c) = (x.shape()[nd - 2], x.shape()[nd - 1]);
        if l != self.config.lookback {
            return Err(Error::shape(
                "forward",
                format!("lookback L={l} but model expects L={}", self.config.lookback),
            ));
        }
        if c != self.config.channels {
            return Err(Error::shape(
                "forward",
                format!("channels C={c} but model expects C={}", self.config.channels),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        self.forward_traced(x, ctx).map(|(y, _)| y)
    }

    /// `[.., L, C] -> [.., T, C]` plus the intermediate tensors.
    pub fn forward_traced(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<(Tensor, ForwardTrace)> {
        self.check_input(x)?;
        let (xn, stats) = self.revin.normalize(x)?;
        let patches = make_patches(&xn, &self.grid)?;
        let mut embedded = self.embedder.forward(&patches)?;
        if let Some(pos) = &self.positional {
            embedded = embedded.add(pos)?;
        }

        let temporal_encoder = self.config.variant == Variant::TemporalEncoder;
        let mut encoder_weights = Vec::with_capacity(self.encoder.len());
        let encoder_output = if self.encoder.is_empty() {
            None
        } else {
            let mut h = if temporal_encoder {
                embedded.clone()
            } else {
                swap_slice_axes(&embedded)?
            };
            for block in &self.encoder {
                let (next, w) = block.forward(&h, ctx)?;
                h = next;
                encoder_weights.push(w);
            }
            Some(if temporal_encoder { h } else { swap_slice_axes(&h)? })
        };

        let cross_mask = if self.config.cross_attn_causal {
            AttnMask::Causal
        } else {
            AttnMask::None
        };
        let mut decoder_self_weights = Vec::with_capacity(self.decoder.len());
        let mut decoder_cross_weights = Vec::with_capacity(self.decoder.len());
        let features = if self.decoder.is_empty() {
            encoder_output
                .clone()
                .ok_or_else(|| Error::Config("model has neither encoder nor decoder".into()))?
        } else {
            let mut h = embedded.clone();
            for block in &self.decoder {
                let (next, w) = block.forward(&h, encoder_output.as_ref(), cross_mask, ctx)?;
                h = next;
                decoder_self_weights.push(w.self_attn);
                decoder_cross_weights.push(w.cross_attn);
            }
            h
        };

        // [.., C, N, d] -> [.., C, N*d] -> [.., C, T] -> [.., T, C]
        let nd = features.ndim();
        let mut flat_shape = features.shape()[..nd - 2].to_vec();
        flat_shape.push(self.grid.num_patches * self.config.d_model);
        let y = self.head.forward(&features.reshape(&flat_shape)?)?.transpose_last2()?;
        let y = self.revin.denormalize(&y, &stats)?;
        Ok((
            y,
            ForwardTrace {
                patches,
                embedded,
                encoder_weights,
                encoder_output,
                decoder_self_weights,
                decoder_cross_weights,
            },
        ))
    }
}

impl Module for SentinelModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.revin.visit(&join(prefix, "revin"), f);
        self.embedder.visit(&join(prefix, "embed"), f);
        if let Some(p) = &self.positional {
            f(&join(prefix, "positional"), p);
        }
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("encoder.{i}")), f);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.revin.visit_mut(&join(prefix, "revin"), f);
        self.embedder.visit_mut(&join(prefix, "embed"), f);
        if let Some(p) = &mut self.positional {
            f(&join(prefix, "positional"), p);
        }
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("encoder.{i}")), f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Builds the ablation model `variant` from a base configuration.
pub fn ablation_variant(config: &ModelConfig, variant: Variant, seed: u64) -> Result<SentinelModel> {
    SentinelModel::new(config.with_variant(variant), seed)
}
