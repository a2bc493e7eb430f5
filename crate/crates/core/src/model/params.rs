//! Parameter containers.
//!
//! [`ModelParams`] is generic over its leaf type so the same layout holds
//! owned tensors (`ModelParams<Tensor>`), tape handles (`ModelParams<Var>`)
//! or optimizer state. Every traversal visits leaves in one fixed order with
//! stable dotted names; checkpoints and the optimizer rely on that order.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Tape, Var};
use crate::baselines::{AttentionKind, FfnKind};
use crate::config::ModelConfig;
use crate::error::{FuxiError, Result};
use crate::tensor::Tensor;

/// Parameters of one stacked block. Which optional fields are present
/// depends on the variant; for the full model every field is populated.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    /// RMS gain applied before attention, `[d]`.
    pub attn_norm: T,
    /// `[d, H·d_h]` each.
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    /// Gate projection: `[d, 3·H·d_h]` for AMS, `[d, H·d_h]` for the
    /// HSTU-like block.
    pub w_u: Option<T>,
    /// Per-head temporal bucket biases, `[H, n_b]`.
    pub temporal_bias: Option<T>,
    /// Per-head relative position biases, `[H, n]`.
    pub positional_bias: Option<T>,
    /// Output projection from the attention width back to `[d]`.
    pub w_o: T,
    pub ffn_norm: Option<T>,
    /// `[d, d_ffn]`
    pub w_1: Option<T>,
    /// `[d, d_ffn]`, SwiGLU only.
    pub w_2: Option<T>,
    /// `[d_ffn, d]`
    pub w_3: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// `[vocab, d]`; row 0 is the padding item and stays zero.
    pub item_embeddings: T,
    /// `[n, d]`
    pub positional_embeddings: T,
    pub blocks: Vec<LayerParams<T>>,
}

impl<T> LayerParams<T> {
    fn entries(&self) -> [(&'static str, Option<&T>); 12] {
        [
            ("attn_norm", Some(&self.attn_norm)),
            ("w_q", Some(&self.w_q)),
            ("w_k", Some(&self.w_k)),
            ("w_v", Some(&self.w_v)),
            ("w_u", self.w_u.as_ref()),
            ("temporal_bias", self.temporal_bias.as_ref()),
            ("positional_bias", self.positional_bias.as_ref()),
            ("w_o", Some(&self.w_o)),
            ("ffn_norm", self.ffn_norm.as_ref()),
            ("w_1", self.w_1.as_ref()),
            ("w_2", self.w_2.as_ref()),
            ("w_3", self.w_3.as_ref()),
        ]
    }

    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> std::result::Result<U, E>) -> std::result::Result<LayerParams<U>, E> {
        let mut one = |name: &str, t: &T| f(&format!("{prefix}.{name}"), t);
        Ok(LayerParams {
            attn_norm: one("attn_norm", &self.attn_norm)?,
            w_q: one("w_q", &self.w_q)?,
            w_k: one("w_k", &self.w_k)?,
            w_v: one("w_v", &self.w_v)?,
            w_u: self.w_u.as_ref().map(|t| one("w_u", t)).transpose()?,
            temporal_bias: self.temporal_bias.as_ref().map(|t| one("temporal_bias", t)).transpose()?,
            positional_bias: self.positional_bias.as_ref().map(|t| one("positional_bias", t)).transpose()?,
            w_o: one("w_o", &self.w_o)?,
            ffn_norm: self.ffn_norm.as_ref().map(|t| one("ffn_norm", t)).transpose()?,
            w_1: self.w_1.as_ref().map(|t| one("w_1", t)).transpose()?,
            w_2: self.w_2.as_ref().map(|t| one("w_2", t)).transpose()?,
            w_3: self.w_3.as_ref().map(|t| one("w_3", t)).transpose()?,
        })
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.attn_norm"), &mut self.attn_norm);
        f(&format!("{prefix}.w_q"), &mut self.w_q);
        f(&format!("{prefix}.w_k"), &mut self.w_k);
        f(&format!("{prefix}.w_v"), &mut self.w_v);
        for (name, slot) in [("w_u", &mut self.w_u), ("temporal_bias", &mut self.temporal_bias), ("positional_bias", &mut self.positional_bias)] {
            if let Some(t) = slot {
                f(&format!("{prefix}.{name}"), t);
            }
        }
        f(&format!("{prefix}.w_o"), &mut self.w_o);
        for (name, slot) in [("ffn_norm", &mut self.ffn_norm), ("w_1", &mut self.w_1), ("w_2", &mut self.w_2), ("w_3", &mut self.w_3)] {
            if let Some(t) = slot {
                f(&format!("{prefix}.{name}"), t);
            }
        }
    }
}

impl<T> ModelParams<T> {
    /// Visits every leaf in canonical order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        f("item_embeddings", &self.item_embeddings);
        f("positional_embeddings", &self.positional_embeddings);
        for (l, block) in self.blocks.iter().enumerate() {
            for (name, t) in block.entries() {
                if let Some(t) = t {
                    f(&format!("blocks.{l}.{name}"), t);
                }
            }
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        f("item_embeddings", &mut self.item_embeddings);
        f("positional_embeddings", &mut self.positional_embeddings);
        for (l, block) in self.blocks.iter_mut().enumerate() {
            block.for_each_mut(&format!("blocks.{l}"), &mut f);
        }
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> std::result::Result<U, E>) -> std::result::Result<ModelParams<U>, E> {
        Ok(ModelParams {
            item_embeddings: f("item_embeddings", &self.item_embeddings)?,
            positional_embeddings: f("positional_embeddings", &self.positional_embeddings)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(l, b)| b.try_map(&format!("blocks.{l}"), &mut f))
                .collect::<std::result::Result<_, E>>()?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        match self.try_map(|n, t| Ok::<U, std::convert::Infallible>(f(n, t))) {
            Ok(p) => p,
            Err(e) => match e {},
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(n.to_string()));
        out
    }
}

/// Shape of every parameter the given config allocates, in canonical order.
pub fn param_shapes(config: &ModelConfig) -> ModelParams<Vec<usize>> {
    let d = config.dim;
    let w = config.channel_width();
    let heads = config.heads_per_channel;
    let attention = config.variant.attention();
    let ffn = config.variant.ffn();
    let attn_width = attention.output_width(config);
    let block = LayerParams {
        attn_norm: vec![d],
        w_q: vec![d, w],
        w_k: vec![d, w],
        w_v: vec![d, w],
        w_u: match attention {
            AttentionKind::MultiChannel | AttentionKind::AdditiveBias => Some(vec![d, attn_width]),
            AttentionKind::Softmax => None,
        },
        temporal_bias: attention.has_relative_bias().then(|| vec![heads, config.time_buckets]),
        positional_bias: attention.has_relative_bias().then(|| vec![heads, config.max_len]),
        w_o: vec![attn_width, d],
        ffn_norm: (ffn != FfnKind::None).then(|| vec![d]),
        w_1: (ffn != FfnKind::None).then(|| vec![d, config.ffn_dim]),
        w_2: (ffn == FfnKind::SwiGlu).then(|| vec![d, config.ffn_dim]),
        w_3: (ffn != FfnKind::None).then(|| vec![config.ffn_dim, d]),
    };
    ModelParams {
        item_embeddings: vec![config.vocab, d],
        positional_embeddings: vec![config.max_len, d],
        blocks: vec![block; config.layers],
    }
}

/// Closed-form count of learnable scalars.
///
/// Per block: `d` (attention gain) + `3·d·w` (q, k, v) with `w = H·d_h`,
/// then by attention kind
/// * multi-channel: `3·d·w` (gate) + `H·(n_b + n)` (biases) + `3·w·d` (output),
/// * additive-bias: `d·w` + `H·(n_b + n)` + `w·d`,
/// * softmax: `w·d`,
///
/// and by feed-forward kind
/// * SwiGLU: `d + 3·d·d_ffn`, ReLU: `d + 2·d·d_ffn`, none: `0`.
///
/// Plus `vocab·d + n·d` for the embeddings.
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.dim;
    let w = config.channel_width();
    let h = config.heads_per_channel;
    let biases = h * (config.time_buckets + config.max_len);
    let attention = match config.variant.attention() {
        AttentionKind::MultiChannel => 3 * d * w + biases + 3 * w * d,
        AttentionKind::AdditiveBias => d * w + biases + w * d,
        AttentionKind::Softmax => w * d,
    };
    let ffn = match config.variant.ffn() {
        FfnKind::SwiGlu => d + 3 * d * config.ffn_dim,
        FfnKind::Relu => d + 2 * d * config.ffn_dim,
        FfnKind::None => 0,
    };
    let block = d + 3 * d * w + attention + ffn;
    config.layers * block + config.vocab * d + config.max_len * d
}

fn xavier<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let (fan_in, fan_out) = (shape[0], shape[1]);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches data")
}

impl ModelParams<Tensor> {
    /// Fresh parameters: embeddings ~ N(0, 1/d), projections Xavier-uniform,
    /// RMS gains 1, relative biases ~ N(0, 0.02). The padding row and, when
    /// requested, the temporal biases start at zero.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let emb_std = 1.0 / (config.dim as f64).sqrt();
        let shapes = param_shapes(config);
        let mut params = shapes.map(|name, shape| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            let t = match leaf {
                "item_embeddings" | "positional_embeddings" => normal(shape, emb_std, rng),
                "attn_norm" | "ffn_norm" => Tensor::full(shape, 1.0),
                "temporal_bias" if config.zero_temporal_bias => Tensor::zeros(shape),
                "temporal_bias" | "positional_bias" => normal(shape, 0.02, rng),
                _ => xavier(shape, rng),
            };
            t.with_grad()
        });
        params.zero_padding_row();
        Ok(params)
    }

    pub fn zero_padding_row(&mut self) {
        let d = self.item_embeddings.last_dim();
        self.item_embeddings.data_mut()[..d].fill(0.0);
    }

    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.numel());
        n
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(|_, t| tape.leaf(t.clone().with_grad()))
    }

    /// Registers every tensor as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(|_, t| tape.constant(t.clone()))
    }

    /// All values concatenated in canonical order.
    pub fn flatten(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.scalar_count());
        self.for_each(|_, t| data.extend_from_slice(t.data()));
        let n = data.len();
        Tensor::new(vec![n], data).expect("flat length")
    }

    /// Inverse of [`ModelParams::flatten`] for the layout of `config`.
    pub fn unflatten(config: &ModelConfig, flat: &[f64]) -> Result<Self> {
        let shapes = param_shapes(config);
        let mut offset = 0;
        let params = shapes.try_map(|_, shape| {
            let n: usize = shape.iter().product();
            let chunk = flat.get(offset..offset + n).ok_or_else(|| FuxiError::invalid("flat parameter vector too short"))?;
            offset += n;
            Tensor::new(shape.clone(), chunk.to_vec())
        })?;
        if offset != flat.len() {
            return Err(FuxiError::invalid("flat parameter vector too long"));
        }
        Ok(params)
    }
}

impl ModelParams<Var> {
    /// Carves parameter views out of one flat tape variable; used by the
    /// whole-model gradient check.
    pub fn from_flat(tape: &mut Tape, flat: Var, config: &ModelConfig) -> Result<Self> {
        let shapes = param_shapes(config);
        let mut offset = 0;
        shapes.try_map(|_, shape| {
            let v = tape.view(flat, offset, shape)?;
            offset += shape.iter().product::<usize>();
            Ok(v)
        })
    }
}
