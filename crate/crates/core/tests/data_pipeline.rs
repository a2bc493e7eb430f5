mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fuxi::data::*;
use fuxi::FuxiError;
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn ev(user: u64, item: u64, timestamp: i64) -> InteractionEvent {
    InteractionEvent {
        user,
        item,
        timestamp,
        rating: None,
    }
}

#[test]
fn parses_movielens_lines() {
    let events = parse_interactions(&fixture("sample_ratings.dat"), DataFormat::MovielensDat).unwrap();
    assert_eq!(events.len(), 8);
    assert_eq!(
        events[0],
        InteractionEvent {
            user: 1,
            item: 1193,
            timestamp: 978300760,
            rating: Some(5.0)
        }
    );
    let again = parse_interactions(&fixture("sample_ratings.dat"), DataFormat::MovielensDat).unwrap();
    assert_eq!(events, again);
}

#[test]
fn malformed_lines_name_their_line() {
    let err = parse_str("1::2::3::4\n1::2::3\n", DataFormat::MovielensDat, "mem").unwrap_err();
    assert!(matches!(err, FuxiError::Parse { line: 2, .. }), "{err}");
    assert!(err.to_string().contains('2'));
    let err = parse_str("1::x::3::4\n", DataFormat::MovielensDat, "mem").unwrap_err();
    assert!(matches!(err, FuxiError::Parse { line: 1, .. }));
    assert!(matches!(parse_str("", DataFormat::MovielensDat, "mem"), Err(FuxiError::Data(_))));
    assert!(matches!(parse_str("\n\n", DataFormat::MovielensDat, "mem"), Err(FuxiError::Data(_))));
    assert!(parse_interactions(Path::new("/nonexistent/ratings.dat"), DataFormat::MovielensDat).is_err());
}

#[test]
fn parses_csv() {
    let events = parse_interactions(&fixture("sample.csv"), DataFormat::Csv).unwrap();
    assert_eq!(events.len(), 3);
    assert_eq!(events[1].item, 10);
    assert_eq!(events[0].rating, Some(4.5));
    let plain = parse_str("user,item,timestamp\n1,2,3\n", DataFormat::Csv, "mem").unwrap();
    assert_eq!(plain, vec![ev(1, 2, 3)]);
    let err = parse_str("user,item,timestamp\n1,2,3\n1,2,oops\n", DataFormat::Csv, "mem").unwrap_err();
    assert!(matches!(err, FuxiError::Parse { line: 3, .. }), "{err}");
    assert!(parse_str("u,i,t\n1,2,3\n", DataFormat::Csv, "mem").is_err());
    assert!(matches!(parse_str("user,item,timestamp\n", DataFormat::Csv, "mem"), Err(FuxiError::Data(_))));
}

#[test]
fn sequences_are_sorted_truncated_and_remapped() {
    let events = vec![ev(5, 30, 300), ev(5, 10, 100), ev(5, 20, 200), ev(5, 40, 200), ev(2, 10, 7)];
    let set = build_sequences(&events, 10).unwrap();
    assert_eq!(set.users[0].user, 2);
    let u5 = &set.users[1];
    assert_eq!(u5.timestamps, vec![100, 200, 200, 300]);
    // ties keep input order: item 20 before item 40
    assert_eq!(u5.items.iter().map(|&i| set.remap.raw(i).unwrap()).collect::<Vec<_>>(), vec![10, 20, 40, 30]);
    assert_eq!(set.remap.raw_ids, vec![10, 20, 30, 40]);
    assert_eq!(set.remap.vocab(), 5);
    assert_eq!(set.stats.users, 2);
    assert_eq!(set.stats.items, 4);
    assert_eq!(set.stats.interactions, 5);
    assert_eq!(set.stats.mean_length, 2.5);

    let long: Vec<InteractionEvent> = (0..15).map(|k| ev(1, k, k as i64)).collect();
    let set = build_sequences(&long, 10).unwrap();
    assert_eq!(set.users[0].timestamps, (5..15).collect::<Vec<i64>>());
    assert_eq!(set.stats.mean_length, 15.0);
    assert!(build_sequences(&[], 10).is_err());
}

#[test]
fn leave_last_out_split() {
    let events = vec![ev(1, 1, 1), ev(1, 2, 2), ev(1, 3, 3), ev(1, 4, 4), ev(2, 1, 1), ev(2, 2, 2)];
    let split = split_leave_last(&build_sequences(&events, 10).unwrap()).unwrap();
    assert_eq!(split.dropped_users, 1);
    assert_eq!(split.train[0].items, vec![1, 2]);
    assert_eq!(split.train[0].target, None);
    assert_eq!((split.validation[0].items.clone(), split.validation[0].target), (vec![1, 2], Some(3)));
    assert_eq!((split.test[0].items.clone(), split.test[0].target), (vec![1, 2, 3], Some(4)));

    let short = vec![ev(1, 1, 1), ev(1, 2, 2)];
    assert!(split_leave_last(&build_sequences(&short, 10).unwrap()).is_err());
}

#[test]
fn split_partitions_every_synthetic_history() {
    let spec = SyntheticSpec {
        users: 100,
        length: 12,
        ..SyntheticSpec::default()
    };
    let events = synthesize_dataset(&spec).unwrap();
    let set = build_sequences(&events, 50).unwrap();
    let split = split_leave_last(&set).unwrap();
    assert_eq!(split.test.len(), 100);
    for (k, seq) in set.users.iter().enumerate() {
        let (tr, va, te) = (&split.train[k], &split.validation[k], &split.test[k]);
        assert_eq!(tr.user, seq.user);
        let mut rebuilt = tr.items.clone();
        rebuilt.push(va.target.unwrap());
        rebuilt.push(te.target.unwrap());
        assert_eq!(rebuilt, seq.items);
        // the three target position sets {1..len-3}, {len-2}, {len-1} are disjoint
        assert_eq!(va.items.len(), tr.items.len());
        assert_eq!(te.items.len(), tr.items.len() + 1);
        assert_eq!(te.items[..va.items.len()], va.items[..]);
    }
}

#[test]
fn synthesis_is_deterministic_and_validated() {
    let spec = SyntheticSpec::default();
    assert_eq!(synthesize_dataset(&spec).unwrap(), synthesize_dataset(&spec).unwrap());
    let other = SyntheticSpec { seed: 8, ..spec.clone() };
    assert_ne!(synthesize_dataset(&spec).unwrap(), synthesize_dataset(&other).unwrap());
    for bad in [
        SyntheticSpec { users: 0, ..spec.clone() },
        SyntheticSpec { items: 0, ..spec.clone() },
        SyntheticSpec {
            rule: GapRule::Fixed { targets: vec![1], fidelity: 0.9 },
            ..spec.clone()
        },
    ] {
        assert!(matches!(synthesize_dataset(&bad), Err(FuxiError::Config(_))));
    }
}

/// Next-item counts keyed by (current item, gap class into the current item).
fn transition_counts(spec: &SyntheticSpec) -> BTreeMap<(usize, usize), BTreeMap<usize, usize>> {
    let events = synthesize_dataset(spec).unwrap();
    let mut out: BTreeMap<(usize, usize), BTreeMap<usize, usize>> = BTreeMap::new();
    for user in events.chunks(spec.length) {
        for w in user.windows(3) {
            let class = gap_class_of(spec, w[1].timestamp - w[0].timestamp).unwrap();
            *out.entry((w[1].item as usize, class)).or_default().entry(w[2].item as usize).or_default() += 1;
        }
    }
    out
}

#[test]
fn uniform_rule_gives_uniform_next_items() {
    let spec = SyntheticSpec {
        users: 2000,
        items: 5,
        length: 30,
        gap_classes: vec![GapClass { min_secs: 1, max_secs: 10 }],
        rule: GapRule::Uniform,
        ..SyntheticSpec::default()
    };
    let mut totals = [0usize; 6];
    for counts in transition_counts(&spec).values() {
        for (&item, &c) in counts {
            totals[item] += c;
        }
    }
    let n: usize = totals.iter().sum();
    for &c in &totals[1..] {
        assert!((c as f64 / n as f64 - 0.2).abs() < 0.05);
    }
}

#[test]
fn two_class_rule_frequencies_match_the_plant() {
    let (a, b) = (3, 7);
    let spec = SyntheticSpec {
        users: 300,
        items: 10,
        length: 40,
        gap_classes: vec![GapClass { min_secs: 1, max_secs: 60 }, GapClass { min_secs: 86_400, max_secs: 100_000 }],
        rule: GapRule::Fixed { targets: vec![a, b], fidelity: 0.9 },
        ..SyntheticSpec::default()
    };
    let mut per_class = [(0usize, 0usize); 2];
    for ((_, class), counts) in transition_counts(&spec) {
        let target = if class == 0 { a } else { b };
        per_class[class].0 += counts.get(&target).copied().unwrap_or(0);
        per_class[class].1 += counts.values().sum::<usize>();
    }
    for (hits, total) in per_class {
        assert!(total >= 1000);
        assert!((hits as f64 / total as f64 - 0.9).abs() < 0.05, "{hits}/{total}");
    }
}

fn examples(k: usize) -> Vec<Example> {
    (0..k)
        .map(|u| Example {
            user: u as u64,
            items: (1..=u % 5 + 1).collect(),
            timestamps: (0..=(u % 5) as i64).collect(),
            target: Some(u % 3 + 1),
        })
        .collect()
}

#[test]
fn batching_covers_each_example_once() {
    let part = examples(10);
    let sizes: Vec<usize> = batch_iterator(&part, 4, 6, Some(1)).unwrap().map(|b| b.unwrap().batch.batch_size()).collect();
    assert_eq!(sizes, vec![4, 4, 2]);
    let order = |seed| {
        batch_iterator(&part, 4, 6, Some(seed))
            .unwrap()
            .flat_map(|b| b.unwrap().members)
            .collect::<Vec<_>>()
    };
    assert_eq!(order(9), order(9));
    let mut seen = order(9);
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());

    let mut rebuilt = Vec::new();
    for b in batch_iterator(&part, 3, 6, Some(2)).unwrap() {
        let b = b.unwrap();
        for (row, &m) in b.members.iter().enumerate() {
            rebuilt.push((b.batch.row_items(row).to_vec(), b.batch.row_timestamps(row).to_vec(), b.targets[row]));
            assert_eq!(b.targets[row], part[m].target);
        }
    }
    let mut original: Vec<_> = part.iter().map(|e| (e.items.clone(), e.timestamps.clone(), e.target)).collect();
    rebuilt.sort();
    original.sort();
    assert_eq!(rebuilt, original);

    assert!(batch_iterator(&part, 0, 6, None).is_err());
    assert!(batch_iterator(&[], 2, 6, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn remapped_ids_are_contiguous(raw in proptest::collection::vec((1u64..20, 1u64..500, 0i64..1000), 1..80)) {
        let events: Vec<InteractionEvent> = raw.iter().map(|&(u, i, t)| ev(u, i, t)).collect();
        let set = build_sequences(&events, 7).unwrap();
        let mut used: Vec<usize> = set.users.iter().flat_map(|s| s.items.iter().copied()).collect();
        used.sort();
        used.dedup();
        prop_assert!(used.iter().all(|&i| i >= 1 && i <= set.remap.len()));
        for s in &set.users {
            prop_assert!(s.items.len() <= 7);
            prop_assert!(s.timestamps.windows(2).all(|w| w[0] <= w[1]));
        }
        for (k, &raw) in set.remap.raw_ids.iter().enumerate() {
            prop_assert_eq!(set.remap.dense(raw), Some(k + 1));
        }
    }
}

/// Runs only when `FUXI_ML1M` points at MovieLens-1M `ratings.dat`.
#[test]
#[ignore]
fn movielens_1m_statistics() {
    let path = std::env::var("FUXI_ML1M").expect("set FUXI_ML1M to the MovieLens-1M ratings.dat path");
    let events = parse_interactions(Path::new(&path), DataFormat::MovielensDat).unwrap();
    assert_eq!(events.len(), 1_000_209);
    let set = build_sequences(&events, 200).unwrap();
    assert_eq!(set.stats.items, 3_706);
    assert_eq!(set.stats.users, 6_040);
    assert!((set.stats.mean_length - 165.60).abs() < 0.01);
}
