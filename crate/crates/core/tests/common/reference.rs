//! Straight-line loop implementation of every variant's forward pass, written
//! independently of the tape so it can serve as an oracle.

use fuxi::baselines::{AttentionKind, FfnKind};
use fuxi::model::{relative_time_bucket, LayerParams, ModelParams, SequenceBatch};
use fuxi::{ModelConfig, Tensor};

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn rms(x: &[f64], gain: Option<&[f64]>, eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| v * inv * gain.map_or(1.0, |g| g[i]))
        .collect()
}

/// `x · W` for a row vector `x` and `W` stored row-major `[x.len(), cols]`.
fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let cols = w.shape()[1];
    let mut out = vec![0.0; cols];
    for (i, xv) in x.iter().enumerate() {
        for c in 0..cols {
            out[c] += xv * w.data()[i * cols + c];
        }
    }
    out
}

fn at(t: &Tensor, r: usize, c: usize) -> f64 {
    t.data()[r * t.shape()[1] + c]
}

/// Hidden states `[T][d]` for one row of the batch.
pub fn hidden_row(params: &ModelParams<Tensor>, batch: &SequenceBatch, b: usize, cfg: &ModelConfig) -> Vec<Vec<f64>> {
    let t = batch.width();
    let len = batch.valid_len()[b];
    let d = cfg.dim;
    let mut x: Vec<Vec<f64>> = (0..t)
        .map(|j| {
            if j < len {
                let id = batch.item(b, j);
                (0..d).map(|c| at(&params.item_embeddings, id, c) + at(&params.positional_embeddings, j, c)).collect()
            } else {
                vec![0.0; d]
            }
        })
        .collect();
    for layer in &params.blocks {
        x = block_row(&x, layer, batch, b, cfg);
    }
    x
}

fn block_row(x: &[Vec<f64>], layer: &LayerParams<Tensor>, batch: &SequenceBatch, b: usize, cfg: &ModelConfig) -> Vec<Vec<f64>> {
    let t = x.len();
    let len = batch.valid_len()[b];
    let (heads, dh) = (cfg.heads_per_channel, cfg.head_dim);
    let attention = cfg.variant.attention();
    let act = |v: Vec<f64>| -> Vec<f64> {
        if attention == AttentionKind::Softmax {
            v
        } else {
            v.into_iter().map(silu).collect()
        }
    };
    let xt: Vec<Vec<f64>> = x.iter().map(|r| rms(r, Some(layer.attn_norm.data()), cfg.rms_eps)).collect();
    let q: Vec<Vec<f64>> = xt.iter().map(|r| act(vecmat(r, &layer.w_q))).collect();
    let k: Vec<Vec<f64>> = xt.iter().map(|r| act(vecmat(r, &layer.w_k))).collect();
    let v: Vec<Vec<f64>> = xt.iter().map(|r| act(vecmat(r, &layer.w_v))).collect();
    let n = cfg.max_len as f64;

    let mut h_rows = Vec::with_capacity(t);
    for i in 0..t {
        let allowed = |j: usize| j <= i && i < len;
        // weights[c][h][j] per channel
        let mut channels: Vec<Vec<Vec<f64>>> = Vec::new();
        match attention {
            AttentionKind::MultiChannel | AttentionKind::AdditiveBias => {
                let alpha = layer.temporal_bias.as_ref().unwrap();
                let beta = layer.positional_bias.as_ref().unwrap();
                let mut sem = vec![vec![0.0; t]; heads];
                let mut pos = vec![vec![0.0; t]; heads];
                let mut tmp = vec![vec![0.0; t]; heads];
                for h in 0..heads {
                    for j in 0..t {
                        if !allowed(j) {
                            continue;
                        }
                        let s: f64 = (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum();
                        sem[h][j] = silu(s) / n;
                        pos[h][j] = at(beta, h, i - j);
                        let delta = batch.timestamp(b, i) - batch.timestamp(b, j);
                        tmp[h][j] = at(alpha, h, relative_time_bucket(delta, cfg).unwrap());
                    }
                }
                if attention == AttentionKind::MultiChannel {
                    channels = vec![sem, pos, tmp];
                } else {
                    let sum = (0..heads)
                        .map(|h| (0..t).map(|j| sem[h][j] + pos[h][j] + tmp[h][j]).collect())
                        .collect();
                    channels = vec![sum];
                }
            }
            AttentionKind::Softmax => {
                let mut w = vec![vec![0.0; t]; heads];
                for h in 0..heads {
                    if i >= len {
                        continue;
                    }
                    let s: Vec<f64> = (0..=i)
                        .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                    for j in 0..=i {
                        w[h][j] = (s[j] - m).exp() / z;
                    }
                }
                channels.push(w);
            }
        }
        let mut cat = Vec::new();
        for ch in &channels {
            for h in 0..heads {
                for c in 0..dh {
                    cat.push((0..t).map(|j| ch[h][j] * v[j][h * dh + c]).sum::<f64>());
                }
            }
        }
        let out = if attention == AttentionKind::Softmax {
            cat
        } else {
            let normed = rms(&cat, None, cfg.rms_eps);
            let gate = vecmat(&xt[i], layer.w_u.as_ref().unwrap());
            normed.iter().zip(&gate).map(|(a, g)| a * silu(*g)).collect()
        };
        h_rows.push(out);
    }

    let mut result = Vec::with_capacity(t);
    for i in 0..t {
        let proj = vecmat(&h_rows[i], &layer.w_o);
        let o: Vec<f64> = proj.iter().zip(&x[i]).map(|(a, b)| a + b).collect();
        let row = match cfg.variant.ffn() {
            FfnKind::None => o,
            kind => {
                let r = rms(&o, Some(layer.ffn_norm.as_ref().unwrap().data()), cfg.rms_eps);
                let a = vecmat(&r, layer.w_1.as_ref().unwrap());
                let inner: Vec<f64> = if kind == FfnKind::SwiGlu {
                    let g = vecmat(&r, layer.w_2.as_ref().unwrap());
                    a.iter().zip(&g).map(|(a, g)| silu(*a) * g).collect()
                } else {
                    a.iter().map(|v| v.max(0.0)).collect()
                };
                let f = vecmat(&inner, layer.w_3.as_ref().unwrap());
                f.iter().zip(&o).map(|(a, b)| a + b).collect()
            }
        };
        result.push(row);
    }
    result
}

/// Logits `[B][T][vocab]`.
pub fn logits(params: &ModelParams<Tensor>, batch: &SequenceBatch, cfg: &ModelConfig) -> Vec<Vec<Vec<f64>>> {
    (0..batch.batch_size())
        .map(|b| {
            hidden_row(params, batch, b, cfg)
                .iter()
                .map(|h| {
                    (0..cfg.vocab)
                        .map(|id| (0..cfg.dim).map(|c| h[c] * at(&params.item_embeddings, id, c)).sum())
                        .collect()
                })
                .collect()
        })
        .collect()
}
