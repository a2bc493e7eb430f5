mod common;

use std::collections::BTreeSet;

use fuxi::autodiff::Tape;
use fuxi::baselines::VariantKind;
use fuxi::checkpoint;
use fuxi::data::{build_sequences, split_leave_last, synthesize_dataset, DatasetSplit, Example, InteractionEvent, SyntheticSpec};
use fuxi::metrics::{compute_metrics, evaluate, rank_of_target};
use fuxi::model::{ModelParams, SequenceBatch};
use fuxi::train::{collect_grads, sample_negatives, sequence_loss, train, AdamW};
use fuxi::{ModelConfig, Tensor, TrainConfig};
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn toy_split() -> DatasetSplit {
    // 20 users cycling through a fixed pattern of 6 items
    let mut events = Vec::new();
    for u in 1..=20u64 {
        for j in 0..12u64 {
            events.push(InteractionEvent {
                user: u,
                item: (u + j) % 6 + 1,
                timestamp: (j * 100) as i64,
                rating: None,
            });
        }
    }
    split_leave_last(&build_sequences(&events, 16).unwrap()).unwrap()
}

fn toy_model(vocab: usize) -> ModelConfig {
    ModelConfig {
        dim: 8,
        head_dim: 8,
        ffn_dim: 16,
        layers: 2,
        max_len: 16,
        time_buckets: 16,
        negatives: 3,
        vocab,
        max_time_span: 10_000,
        ..ModelConfig::default()
    }
}

fn toy_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        eval_every: 0,
        learning_rate: 5e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let split = toy_split();
    let model = toy_model(split.vocab());
    let cfg = toy_train(0);
    let out = train(&split, &model, &cfg).unwrap();
    let init = ModelParams::init(&model, &mut common::rng(cfg.seed)).unwrap();
    assert_eq!(out.params, init);
    assert!(out.history.is_empty());
    assert_eq!(out.steps, 0);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let split = toy_split();
    let model = toy_model(split.vocab());
    let cfg = toy_train(5);
    let a = train(&split, &model, &cfg).unwrap();
    let b = train(&split, &model, &cfg).unwrap();
    let losses: Vec<f64> = a.history.iter().map(|e| e.mean_loss).collect();
    assert_eq!(losses, b.history.iter().map(|e| e.mean_loss).collect::<Vec<_>>());
    assert_eq!(checkpoint::encode(&model, &a.params).unwrap(), checkpoint::encode(&model, &b.params).unwrap());
    assert_eq!(losses.len(), 5);
    assert!(losses[4] < losses[0], "{losses:?}");
    assert!(a.params.item_embeddings.row(0).iter().all(|&v| v == 0.0));
}

#[test]
fn frozen_temporal_biases_stay_zero() {
    let split = toy_split();
    let model = ModelConfig {
        zero_temporal_bias: true,
        ..toy_model(split.vocab())
    };
    let out = train(&split, &model, &toy_train(2)).unwrap();
    for block in &out.params.blocks {
        assert!(block.temporal_bias.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(block.positional_bias.as_ref().unwrap().data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn early_stopping_returns_a_validated_epoch() {
    let split = toy_split();
    let model = toy_model(split.vocab());
    let cfg = TrainConfig {
        epochs: 12,
        eval_every: 2,
        patience: 2,
        ..toy_train(0)
    };
    let out = train(&split, &model, &cfg).unwrap();
    assert!(out.best_epoch % 2 == 0 && out.best_epoch <= out.history.len());
    let best = out.history[out.best_epoch - 1].validation.as_ref().unwrap().ndcg[&10];
    let replay = evaluate(&out.params, &model, &split.validation, &[10], 8).unwrap();
    assert_eq!(replay.ndcg[&10], best);
}

#[test]
fn adamw_first_step_closed_form() {
    let cfg = ModelConfig {
        layers: 0,
        dim: 1,
        head_dim: 1,
        vocab: 2,
        max_len: 1,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(&cfg, &mut common::rng(0)).unwrap();
    params.item_embeddings.data_mut()[1] = 0.5;
    params.positional_embeddings.data_mut()[0] = -2.0;
    params.item_embeddings.set_grad(vec![7.0, 0.3]).unwrap();
    params.positional_embeddings.set_grad(vec![-1.0]).unwrap();
    let tc = TrainConfig::default();
    let mut opt = AdamW::new(&params, &tc);
    opt.step(&mut params, |_| false);
    let step = |p: f64, g: f64| p - tc.learning_rate * (g / (g.abs() + tc.adam_eps) + tc.weight_decay * p);
    assert!((params.item_embeddings.data()[1] - step(0.5, 0.3)).abs() < 1e-15);
    assert!((params.positional_embeddings.data()[0] - step(-2.0, -1.0)).abs() < 1e-15);
    assert_eq!(params.item_embeddings.data()[0], 0.0);
}

#[test]
fn sequence_loss_gradients_reach_parameters() {
    let cfg = common::tiny_config(VariantKind::Full);
    let mut params = common::random_params(&cfg, 3);
    let batch = common::random_batch(&cfg, 3, 4, 4);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let mut rng = common::rng(5);
    match sequence_loss(&mut tape, &batch, &vars, &cfg, &mut rng).unwrap() {
        Some((loss, p)) => {
            assert_eq!(p, batch.valid_len().iter().map(|l| l.saturating_sub(1)).sum::<usize>());
            tape.backward(loss).unwrap();
            collect_grads(&tape, &vars, &mut params).unwrap();
            assert!(params.blocks[0].w_q.grad().unwrap().iter().any(|&g| g != 0.0));
        }
        None => assert!(batch.valid_len().iter().all(|&l| l < 2)),
    }
    let single = SequenceBatch::new(vec![3, 0, 0, 0], vec![1, 0, 0, 0], vec![1], 4).unwrap();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    assert!(sequence_loss(&mut tape, &single, &vars, &cfg, &mut rng).unwrap().is_none());
}

#[test]
fn negative_sampling_examples() {
    let mut rng = common::rng(0);
    for _ in 0..100 {
        assert_eq!(sample_negatives(1, 1, 3, &mut rng).unwrap(), vec![2]);
    }
    assert!(sample_negatives(1, 2, 3, &mut rng).is_err());
    assert!(sample_negatives(0, 1, 5, &mut rng).is_err());
    assert!(sample_negatives(5, 1, 5, &mut rng).is_err());

    let vocab = 100;
    let mut counts = vec![0usize; vocab];
    let draws = 100_000;
    for _ in 0..draws {
        let pos = rng.gen_range(1..vocab);
        let neg = sample_negatives(pos, 1, vocab, &mut rng).unwrap()[0];
        assert_ne!(neg, pos);
        assert_ne!(neg, 0);
        counts[neg] += 1;
    }
    let expected = draws as f64 / (vocab - 1) as f64;
    let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((vocab - 2) as f64).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}");

    for _ in 0..1000 {
        let pos = rng.gen_range(1..vocab);
        let negs = sample_negatives(pos, 20, vocab, &mut rng).unwrap();
        let set: BTreeSet<_> = negs.iter().copied().collect();
        assert_eq!(set.len(), 20);
        assert!(!set.contains(&pos) && !set.contains(&0));
    }
}

#[test]
fn metric_fixture() {
    // (rank, HR@1, HR@5, HR@10, NDCG@10, reciprocal rank)
    let l = |r: f64| 1.0 / (r + 1.0).log2();
    let cases = [
        (1, 1.0, 1.0, 1.0, 1.0, 1.0),
        (2, 0.0, 1.0, 1.0, l(2.0), 0.5),
        (3, 0.0, 1.0, 1.0, 0.5, 1.0 / 3.0),
        (5, 0.0, 1.0, 1.0, l(5.0), 0.2),
        (6, 0.0, 0.0, 1.0, l(6.0), 1.0 / 6.0),
        (7, 0.0, 0.0, 1.0, 1.0 / 3.0, 1.0 / 7.0),
        (10, 0.0, 0.0, 1.0, l(10.0), 0.1),
        (11, 0.0, 0.0, 0.0, 0.0, 1.0 / 11.0),
        (15, 0.0, 0.0, 0.0, 0.0, 1.0 / 15.0),
        (3706, 0.0, 0.0, 0.0, 0.0, 1.0 / 3706.0),
    ];
    assert_eq!(l(3.0), 0.5);
    assert!((l(7.0) - 1.0 / 3.0).abs() < 1e-15);
    for &(rank, h1, h5, h10, n10, rr) in &cases {
        let r = compute_metrics(&[rank], &[1, 5, 10]).unwrap();
        assert_eq!((r.hr[&1], r.hr[&5], r.hr[&10]), (h1, h5, h10), "rank {rank}");
        assert!((r.ndcg[&10] - n10).abs() < 1e-15, "rank {rank}");
        assert!((r.mrr - rr).abs() < 1e-15);
    }
    let all: Vec<usize> = cases.iter().map(|c| c.0).collect();
    let r = compute_metrics(&all, &[10]).unwrap();
    assert!((r.hr[&10] - 0.7).abs() < 1e-15);
    assert!((r.mrr - cases.iter().map(|c| c.5).sum::<f64>() / 10.0).abs() < 1e-15);
}

#[test]
fn hand_built_evaluation() {
    // no blocks, zero positional embeddings: the score of item k after item i
    // is E[i]·E[k]
    let cfg = ModelConfig {
        layers: 0,
        dim: 3,
        head_dim: 3,
        vocab: 5,
        max_len: 4,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(&cfg, &mut common::rng(0)).unwrap();
    params.positional_embeddings.data_mut().fill(0.0);
    let e = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.7, 0.7, 0.0], [0.0, 0.0, -1.0]];
    params.item_embeddings = Tensor::new(vec![5, 3], e.concat()).unwrap().with_grad();
    let ex = |items: Vec<usize>, target| Example {
        user: 0,
        timestamps: (0..items.len() as i64).collect(),
        items,
        target: Some(target),
    };
    // after item 1 scores are [1, 0, .7, 0]: target 1 rank 1, target 2 rank 3 (tied with 4, loses), target 4 rank 4
    let users = vec![ex(vec![2, 1], 1), ex(vec![1], 2), ex(vec![3, 1], 4)];
    let r = evaluate(&params, &cfg, &users, &[1, 3], 2).unwrap();
    assert_eq!(r.ranks, vec![1, 4, 4]);
    assert_eq!(rank_of_target(&[f64::NEG_INFINITY, 1.0, 0.0, 0.7, 0.0], 2, &[0]).unwrap(), 4);
    assert!((r.hr[&1] - 1.0 / 3.0).abs() < 1e-15);
    assert!((r.hr[&3] - 1.0 / 3.0).abs() < 1e-15);
    assert!((r.mrr - (1.0 + 0.25 + 0.25) / 3.0).abs() < 1e-15);
    assert_eq!(evaluate(&params, &cfg, &users, &[1, 3], 3).unwrap(), r);
}

#[test]
fn untrained_model_is_a_null_ranker() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, &mut common::rng(11)).unwrap();
    let mut rng = common::rng(12);
    let users: Vec<Example> = (0..3000)
        .map(|u| Example {
            user: u,
            items: (0..4).map(|_| rng.gen_range(1..cfg.vocab)).collect(),
            timestamps: vec![0, 10, 20, 30],
            target: Some(rng.gen_range(1..cfg.vocab)),
        })
        .collect();
    let r = evaluate(&params, &cfg, &users, &[10], 256).unwrap();
    let p = 10.0 / 3706.0;
    let sigma = (p * (1.0 - p) / users.len() as f64).sqrt();
    assert!((r.hr[&10] - p).abs() <= 3.0 * sigma, "{} vs {p} ± {}", r.hr[&10], 3.0 * sigma);
}

#[test]
fn synthetic_end_to_end() {
    let spec = SyntheticSpec {
        users: 60,
        length: 15,
        ..SyntheticSpec::default()
    };
    let split = split_leave_last(&build_sequences(&synthesize_dataset(&spec).unwrap(), 16).unwrap()).unwrap();
    let model = ModelConfig {
        negatives: 8,
        ..toy_model(split.vocab())
    };
    let out = train(&split, &model, &TrainConfig { eval_every: 1, ..toy_train(2) }).unwrap();
    let r = evaluate(&out.params, &model, &split.test, &[1, 10, 50], 16).unwrap();
    assert_eq!(r.users, 60);
}

proptest! {
    #[test]
    fn metric_invariants(ranks in proptest::collection::vec(1usize..200, 1..50)) {
        let ks = [1, 5, 10, 20, 50, 100];
        let r = compute_metrics(&ranks, &ks).unwrap();
        for w in ks.windows(2) {
            prop_assert!(r.hr[&w[0]] <= r.hr[&w[1]]);
            prop_assert!(r.ndcg[&w[0]] <= r.ndcg[&w[1]]);
        }
        for &k in &ks {
            prop_assert!(r.ndcg[&k] <= r.hr[&k]);
            prop_assert!((0.0..=1.0).contains(&r.hr[&k]));
            prop_assert!(r.mrr >= r.hr[&k] / k as f64 - 1e-15);
        }
    }
}
