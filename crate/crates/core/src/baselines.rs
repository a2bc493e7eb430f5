//! Comparison blocks and ablation variants.
//!
//! | kind        | attention      | after attention            |
//! |-------------|----------------|----------------------------|
//! | `full`      | multi-channel  | multi-stage FFN (SwiGLU)   |
//! | `no_mffn`   | multi-channel  | projection + residual      |
//! | `no_ams`    | softmax        | multi-stage FFN (SwiGLU)   |
//! | `base`      | softmax        | projection + residual      |
//! | `vanilla`   | softmax        | projection + ReLU FFN      |
//! | `hstu_like` | additive bias  | projection + residual      |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{FuxiError, Result};
use crate::model::forward::{param, project_qkv, semantic_weights, single_stage, AttnContext};
use crate::model::params::{param_count, LayerParams, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    #[default]
    Full,
    Base,
    NoAms,
    NoMffn,
    Vanilla,
    HstuLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Semantic, positional and temporal channels sharing one value matrix.
    MultiChannel,
    /// Scaled dot-product softmax attention.
    Softmax,
    /// One SiLU channel with temporal and positional biases added to the
    /// weights.
    AdditiveBias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnKind {
    SwiGlu,
    Relu,
    None,
}

impl AttentionKind {
    pub fn has_relative_bias(self) -> bool {
        matches!(self, AttentionKind::MultiChannel | AttentionKind::AdditiveBias)
    }

    pub fn output_width(self, config: &ModelConfig) -> usize {
        match self {
            AttentionKind::MultiChannel => 3 * config.channel_width(),
            AttentionKind::Softmax | AttentionKind::AdditiveBias => config.channel_width(),
        }
    }
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::Full,
        VariantKind::Base,
        VariantKind::NoAms,
        VariantKind::NoMffn,
        VariantKind::Vanilla,
        VariantKind::HstuLike,
    ];

    /// The four rows of the component ablation.
    pub const ABLATION: [VariantKind; 4] = [VariantKind::Full, VariantKind::NoAms, VariantKind::NoMffn, VariantKind::Base];

    pub fn attention(self) -> AttentionKind {
        match self {
            VariantKind::Full | VariantKind::NoMffn => AttentionKind::MultiChannel,
            VariantKind::Base | VariantKind::NoAms | VariantKind::Vanilla => AttentionKind::Softmax,
            VariantKind::HstuLike => AttentionKind::AdditiveBias,
        }
    }

    pub fn ffn(self) -> FfnKind {
        match self {
            VariantKind::Full | VariantKind::NoAms => FfnKind::SwiGlu,
            VariantKind::Vanilla => FfnKind::Relu,
            VariantKind::Base | VariantKind::NoMffn | VariantKind::HstuLike => FfnKind::None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Full => "full",
            VariantKind::Base => "base",
            VariantKind::NoAms => "no_ams",
            VariantKind::NoMffn => "no_mffn",
            VariantKind::Vanilla => "vanilla",
            VariantKind::HstuLike => "hstu_like",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = FuxiError;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| FuxiError::Config(format!("unknown variant `{s}` (expected one of full, base, no_ams, no_mffn, vanilla, hstu_like)")))
    }
}

/// Causal multi-head softmax attention with `1/√d_h` scaling; no activation
/// on the projections and no relative biases. Output width `H·d_h`.
pub fn softmax_attention(tape: &mut Tape, x: Var, ctx: &AttnContext, layer: &LayerParams<Var>, config: &ModelConfig) -> Result<Var> {
    let p = project_qkv(tape, x, layer, config, false)?;
    let scale = 1.0 / (config.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads_per_channel);
    for h in 0..config.heads_per_channel {
        let s = tape.attn_scores(p.q[h], p.k[h], ctx.mask.clone())?;
        let s = tape.scale(s, scale)?;
        let a = tape.masked_softmax(s, ctx.mask.clone())?;
        heads.push(tape.matmul(a, p.v[h])?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        tape.concat_last(&heads)
    }
}

/// Pre-normalization attention output of the additive-bias block:
/// per head `((1/n)·silu(q·kᵀ) + α[bucket] + β[i−j])·v` on allowed pairs.
pub fn additive_bias_heads(tape: &mut Tape, x: Var, ctx: &AttnContext, layer: &LayerParams<Var>, config: &ModelConfig) -> Result<(Vec<Var>, Var)> {
    let p = project_qkv(tape, x, layer, config, true)?;
    let alpha = param(&layer.temporal_bias, "temporal_bias")?;
    let beta = param(&layer.positional_bias, "positional_bias")?;
    let shape = ctx.weight_shape();
    let mut heads = Vec::with_capacity(config.heads_per_channel);
    for h in 0..config.heads_per_channel {
        let a = semantic_weights(tape, p.q[h], p.k[h], ctx, config)?;
        let a_t = tape.gather_scalars(alpha, ctx.temporal_index(h)?, &shape)?;
        let a_p = tape.gather_scalars(beta, ctx.positional_index(h)?, &shape)?;
        let a = tape.add(a, a_t)?;
        let a = tape.add(a, a_p)?;
        heads.push(tape.matmul(a, p.v[h])?);
    }
    Ok((heads, p.normed))
}

/// `RMSN(attention) ⊙ silu(x̃·W_u)` with the additive-bias weights.
pub fn additive_bias_attention(tape: &mut Tape, x: Var, ctx: &AttnContext, layer: &LayerParams<Var>, config: &ModelConfig) -> Result<Var> {
    let (heads, normed) = additive_bias_heads(tape, x, ctx, layer, config)?;
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_last(&heads)? };
    let cat = tape.rms_norm(cat, None, config.rms_eps)?;
    let u = tape.matmul(normed, param(&layer.w_u, "w_u")?)?;
    let gate = tape.silu(u)?;
    tape.mul(cat, gate)
}

/// `o = h·W_o + x_prev`, then `relu(RMSN(o)·W_1)·W_3 + o`.
pub fn relu_ffn_stage(tape: &mut Tape, h: Var, x_prev: Var, layer: &LayerParams<Var>, config: &ModelConfig) -> Result<Var> {
    let o = single_stage(tape, h, x_prev, layer)?;
    let r = tape.rms_norm(o, Some(param(&layer.ffn_norm, "ffn_norm")?), config.rms_eps)?;
    let a = tape.matmul(r, param(&layer.w_1, "w_1")?)?;
    let a = tape.relu(a)?;
    let f = tape.matmul(a, param(&layer.w_3, "w_3")?)?;
    tape.add(f, o)
}

/// SASRec-style block: softmax attention, projection with residual, then a
/// two-layer ReLU FFN with residual. Output `[B, T, d]`.
pub fn vanilla_attention_block(tape: &mut Tape, x: Var, ctx: &AttnContext, layer: &LayerParams<Var>, config: &ModelConfig) -> Result<Var> {
    let h = softmax_attention(tape, x, ctx, layer, config)?;
    relu_ffn_stage(tape, h, x, layer, config)
}

/// HSTU-like block: additive-bias SiLU attention with U-gating, projection
/// and residual, no second-stage FFN. Output `[B, T, d]`.
pub fn hstu_like_block(tape: &mut Tape, x: Var, ctx: &AttnContext, layer: &LayerParams<Var>, config: &ModelConfig) -> Result<Var> {
    let h = additive_bias_attention(tape, x, ctx, layer, config)?;
    single_stage(tape, h, x, layer)
}

/// A model assembly: resolved config plus freshly initialized parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    pub fn param_count(&self) -> usize {
        param_count(&self.config)
    }
}

/// Assembles the model for `kind` on top of `config`'s dimensions.
pub fn build_variant<R: Rng>(kind: VariantKind, config: &ModelConfig, rng: &mut R) -> Result<Model> {
    let config = ModelConfig {
        variant: kind,
        ..config.clone()
    };
    let params = ModelParams::init(&config, rng)?;
    Ok(Model { config, params })
}
