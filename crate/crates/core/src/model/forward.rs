//! Embedding layer, multi-channel attention, multi-stage FFN and the full
//! forward pass.

use std::rc::Rc;

use crate::autodiff::{CausalMask, Tape, Var, MASKED};
use crate::baselines::{self, AttentionKind, FfnKind};
use crate::config::ModelConfig;
use crate::error::{FuxiError, Result};

use super::batch::SequenceBatch;
use super::buckets::bucket_unchecked;
use super::params::{LayerParams, ModelParams};

/// Per-batch attention bookkeeping shared by every layer: the causal mask
/// and, for variants with relative biases, the flat bias-table indices of
/// every allowed `(i, j)` pair.
#[derive(Debug, Clone)]
pub struct AttnContext {
    pub mask: Rc<CausalMask>,
    temporal: Vec<Rc<Vec<usize>>>,
    positional: Vec<Rc<Vec<usize>>>,
    batch: usize,
    width: usize,
}

impl AttnContext {
    pub fn new(batch: &SequenceBatch, config: &ModelConfig) -> Result<Self> {
        let (bsz, t) = (batch.batch_size(), batch.width());
        if t > config.max_len {
            return Err(FuxiError::invalid(format!(
                "batch width {t} exceeds the configured maximum length {}",
                config.max_len
            )));
        }
        let mask = Rc::new(CausalMask::new(batch.valid_len().to_vec(), t));
        let mut ctx = AttnContext {
            mask,
            temporal: Vec::new(),
            positional: Vec::new(),
            batch: bsz,
            width: t,
        };
        if config.variant.attention().has_relative_bias() {
            let mut bucket = vec![MASKED; bsz * t * t];
            let mut offset = vec![MASKED; bsz * t * t];
            for b in 0..bsz {
                let ts = batch.row_timestamps(b);
                for i in 0..t {
                    for j in 0..ctx.mask.key_end(b, i) {
                        let k = (b * t + i) * t + j;
                        let delta = ts[i] - ts[j];
                        if delta < 0 {
                            return Err(FuxiError::invalid(format!("row {b}: timestamps decrease before position {i}")));
                        }
                        bucket[k] = bucket_unchecked(delta as u64, config);
                        offset[k] = i - j;
                    }
                }
            }
            for h in 0..config.heads_per_channel {
                let shift = |base: &[usize], stride: usize| -> Rc<Vec<usize>> {
                    Rc::new(base.iter().map(|&v| if v == MASKED { MASKED } else { h * stride + v }).collect())
                };
                ctx.temporal.push(shift(&bucket, config.time_buckets));
                ctx.positional.push(shift(&offset, config.max_len));
            }
        }
        Ok(ctx)
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.batch, self.width, self.width]
    }

    pub(crate) fn temporal_index(&self, head: usize) -> Result<Rc<Vec<usize>>> {
        self.temporal
            .get(head)
            .cloned()
            .ok_or_else(|| FuxiError::invalid("attention context built without relative-bias indices"))
    }

    pub(crate) fn positional_index(&self, head: usize) -> Result<Rc<Vec<usize>>> {
        self.positional
            .get(head)
            .cloned()
            .ok_or_else(|| FuxiError::invalid("attention context built without relative-bias indices"))
    }
}

/// `x⁰[b, j] = E[item] + p_j` on valid positions, zero on padding.
pub fn embed_sequence(tape: &mut Tape, batch: &SequenceBatch, params: &ModelParams<Var>, config: &ModelConfig) -> Result<Var> {
    let (bsz, t, d) = (batch.batch_size(), batch.width(), config.dim);
    if t > config.max_len {
        return Err(FuxiError::invalid(format!("batch width {t} exceeds n = {}", config.max_len)));
    }
    if let Some(&id) = batch.items().iter().find(|&&id| id >= config.vocab) {
        return Err(FuxiError::IdOutOfRange { id, vocab: config.vocab });
    }
    let e = tape.gather_rows(params.item_embeddings, Rc::new(batch.items().to_vec()))?;
    let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..t).collect();
    let p = tape.gather_rows(params.positional_embeddings, Rc::new(positions))?;
    let x = tape.add(e, p)?;
    let mut keep = Vec::with_capacity(bsz * t * d);
    for b in 0..bsz {
        for j in 0..t {
            let v = if j < batch.valid_len()[b] { 1.0 } else { 0.0 };
            keep.extend(std::iter::repeat(v).take(d));
        }
    }
    let x = tape.mul_const(x, Rc::new(keep))?;
    tape.reshape(x, &[bsz, t, d])
}

pub(crate) fn split_heads(tape: &mut Tape, x: Var, config: &ModelConfig) -> Result<Vec<Var>> {
    let heads = config.heads_per_channel;
    if heads == 1 {
        return Ok(vec![x]);
    }
    (0..heads).map(|h| tape.slice_last(x, h * config.head_dim, config.head_dim)).collect()
}

pub(crate) fn param<'a>(slot: &'a Option<Var>, name: &str) -> Result<Var> {
    slot.ok_or_else(|| FuxiError::invalid(format!("layer has no {name} parameter for this variant")))
}

/// Pre-projection shared by every attention flavour: `x̃ = RMSN(x)` and the
/// q, k, v projections (optionally passed through SiLU).
pub(crate) struct Projections {
    pub normed: Var,
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

pub(crate) fn project_qkv(tape: &mut Tape, x: Var, layer: &LayerParams<Var>, config: &ModelConfig, activate: bool) -> Result<Projections> {
    let normed = tape.rms_norm(x, Some(layer.attn_norm), config.rms_eps)?;
    let mut proj = |w: Var| -> Result<Vec<Var>> {
        let y = tape.matmul(normed, w)?;
        let y = if activate { tape.silu(y)? } else { y };
        split_heads(tape, y, config)
    };
    let q = proj(layer.w_q)?;
    let k = proj(layer.w_k)?;
    let v = proj(layer.w_v)?;
    Ok(Projections { normed, q, k, v })
}

/// `(1/n)·silu(q·kᵀ)` on allowed causal pairs, exactly 0 elsewhere
/// (masked scores are 0 and silu(0) = 0).
pub(crate) fn semantic_weights(tape: &mut Tape, q: Var, k: Var, ctx: &AttnContext, config: &ModelConfig) -> Result<Var> {
    let s = tape.attn_scores(q, k, ctx.mask.clone())?;
    let a = tape.silu(s)?;
    tape.scale(a, 1.0 / config.max_len as f64)
}

/// Outputs of the three AMS channels before concatenation, one entry per
/// head, plus the gate `silu(x̃·W_u)`.
#[derive(Debug, Clone)]
pub struct AmsChannels {
    pub semantic: Vec<Var>,
    pub positional: Vec<Var>,
    pub temporal: Vec<Var>,
    pub gate: Var,
}

pub fn ams_channels(tape: &mut Tape, x: Var, ctx: &AttnContext, layer: &LayerParams<Var>, config: &ModelConfig) -> Result<AmsChannels> {
    let p = project_qkv(tape, x, layer, config, true)?;
    let alpha = param(&layer.temporal_bias, "temporal_bias")?;
    let beta = param(&layer.positional_bias, "positional_bias")?;
    let w_u = param(&layer.w_u, "w_u")?;
    let shape = ctx.weight_shape();
    let (mut semantic, mut positional, mut temporal) = (Vec::new(), Vec::new(), Vec::new());
    for h in 0..config.heads_per_channel {
        let a_h = semantic_weights(tape, p.q[h], p.k[h], ctx, config)?;
        semantic.push(tape.matmul(a_h, p.v[h])?);
        let a_p = tape.gather_scalars(beta, ctx.positional_index(h)?, &shape)?;
        positional.push(tape.matmul(a_p, p.v[h])?);
        let a_t = tape.gather_scalars(alpha, ctx.temporal_index(h)?, &shape)?;
        temporal.push(tape.matmul(a_t, p.v[h])?);
    }
    let u = tape.matmul(p.normed, w_u)?;
    let gate = tape.silu(u)?;
    Ok(AmsChannels {
        semantic,
        positional,
        temporal,
        gate,
    })
}

/// Adaptive multi-channel self-attention:
/// `RMSN(concat(semantic, positional, temporal)) ⊙ silu(x̃·W_u)`,
/// output width `3·H·d_h`.
pub fn ams_attention(tape: &mut Tape, x: Var, ctx: &AttnContext, layer: &LayerParams<Var>, config: &ModelConfig) -> Result<Var> {
    let ch = ams_channels(tape, x, ctx, layer, config)?;
    let parts: Vec<Var> = ch.semantic.iter().chain(&ch.positional).chain(&ch.temporal).copied().collect();
    let cat = tape.concat_last(&parts)?;
    let normed = tape.rms_norm(cat, None, config.rms_eps)?;
    tape.mul(normed, ch.gate)
}

/// Stage one only: `h·W_o + x_prev`.
pub fn single_stage(tape: &mut Tape, h: Var, x_prev: Var, layer: &LayerParams<Var>) -> Result<Var> {
    let proj = tape.matmul(h, layer.w_o)?;
    tape.add(proj, x_prev)
}

/// Multi-stage FFN: `o = h·W_o + x_prev`, then
/// `(silu(RMSN(o)·W_1) ⊙ (RMSN(o)·W_2))·W_3 + o`.
pub fn mffn(tape: &mut Tape, h: Var, x_prev: Var, layer: &LayerParams<Var>, config: &ModelConfig) -> Result<Var> {
    let o = single_stage(tape, h, x_prev, layer)?;
    let r = tape.rms_norm(o, Some(param(&layer.ffn_norm, "ffn_norm")?), config.rms_eps)?;
    let a = tape.matmul(r, param(&layer.w_1, "w_1")?)?;
    let a = tape.silu(a)?;
    let b = tape.matmul(r, param(&layer.w_2, "w_2")?)?;
    let f = tape.mul(a, b)?;
    let f = tape.matmul(f, param(&layer.w_3, "w_3")?)?;
    tape.add(f, o)
}

/// One stacked block of whichever variant `config` selects.
pub fn block(tape: &mut Tape, x: Var, ctx: &AttnContext, layer: &LayerParams<Var>, config: &ModelConfig) -> Result<Var> {
    let h = match config.variant.attention() {
        AttentionKind::MultiChannel => ams_attention(tape, x, ctx, layer, config)?,
        AttentionKind::Softmax => baselines::softmax_attention(tape, x, ctx, layer, config)?,
        AttentionKind::AdditiveBias => baselines::additive_bias_attention(tape, x, ctx, layer, config)?,
    };
    match config.variant.ffn() {
        FfnKind::SwiGlu => mffn(tape, h, x, layer, config),
        FfnKind::None => single_stage(tape, h, x, layer),
        FfnKind::Relu => baselines::relu_ffn_stage(tape, h, x, layer, config),
    }
}

/// Final hidden states `x^b`, shape `[B, T, d]`.
pub fn hidden_states(tape: &mut Tape, batch: &SequenceBatch, params: &ModelParams<Var>, config: &ModelConfig) -> Result<Var> {
    if params.blocks.len() != config.layers {
        return Err(FuxiError::invalid(format!(
            "parameters hold {} blocks but the config asks for {}",
            params.blocks.len(),
            config.layers
        )));
    }
    let ctx = AttnContext::new(batch, config)?;
    let mut x = embed_sequence(tape, batch, params, config)?;
    for layer in &params.blocks {
        x = block(tape, x, &ctx, layer, config)?;
    }
    Ok(x)
}

/// Pre-softmax scores `x^b·Eᵀ`, shape `[B, T, vocab]`.
pub fn forward(tape: &mut Tape, batch: &SequenceBatch, params: &ModelParams<Var>, config: &ModelConfig) -> Result<Var> {
    let x = hidden_states(tape, batch, params, config)?;
    tape.matmul_bt(x, params.item_embeddings)
}
