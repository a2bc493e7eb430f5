#![allow(dead_code)]

pub mod reference;

use fuxi::baselines::VariantKind;
use fuxi::model::{ModelParams, SequenceBatch};
use fuxi::{ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config(variant: VariantKind) -> ModelConfig {
    ModelConfig {
        dim: 4,
        head_dim: 4,
        heads_per_channel: 1,
        ffn_dim: 8,
        layers: 2,
        max_len: 4,
        time_buckets: 8,
        negatives: 3,
        vocab: 7,
        time_bucket_base: 1.0,
        max_time_span: 1000,
        variant,
        ..ModelConfig::default()
    }
}

/// Random parameters with larger-than-default bias scales so every channel
/// contributes visibly.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams<Tensor> {
    let mut r = rng(seed);
    let mut p = ModelParams::init(cfg, &mut r).unwrap();
    p.for_each_mut(|name, t| {
        if name.ends_with("bias") || name.ends_with("norm") {
            for v in t.data_mut() {
                *v += r.gen_range(-0.5..0.5);
            }
        }
    });
    p
}

/// Random batch with strictly increasing event times and random valid lengths.
pub fn random_batch(cfg: &ModelConfig, bsz: usize, width: usize, seed: u64) -> SequenceBatch {
    let mut r = rng(seed);
    let mut items = vec![0; bsz * width];
    let mut ts = vec![0i64; bsz * width];
    let mut lens = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let len = r.gen_range(1..=width);
        let mut t = r.gen_range(0..1_000_000i64);
        for j in 0..len {
            items[b * width + j] = r.gen_range(1..cfg.vocab);
            t += r.gen_range(0..300);
            ts[b * width + j] = t;
        }
        lens.push(len);
    }
    SequenceBatch::new(items, ts, lens, width).unwrap()
}

pub fn full_batch(cfg: &ModelConfig, bsz: usize, width: usize, seed: u64) -> SequenceBatch {
    let mut r = rng(seed);
    let mut items = Vec::new();
    let mut ts = Vec::new();
    for _ in 0..bsz {
        let mut t = r.gen_range(0..1_000_000i64);
        for _ in 0..width {
            items.push(r.gen_range(1..cfg.vocab));
            t += r.gen_range(0..300);
            ts.push(t);
        }
    }
    SequenceBatch::new(items, ts, vec![width; bsz], width).unwrap()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}
