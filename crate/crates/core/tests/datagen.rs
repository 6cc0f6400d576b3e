use std::collections::BTreeMap;

use proptest::prelude::*;
use skillslice::datagen::{self, intent_counts, DatasetManifest, TrafficConfig};
use skillslice::slicing::SliceConfig;
use skillslice::Error;

fn cfg(num_samples: usize) -> TrafficConfig {
    TrafficConfig {
        num_samples,
        ..TrafficConfig::default()
    }
}

fn rank_counts(c: &TrafficConfig) -> Vec<usize> {
    let counts = intent_counts(&datagen::generate_samples(c).unwrap());
    (1..=c.num_intents)
        .map(|r| counts.get(&datagen::intent_name(r)).copied().unwrap_or(0))
        .collect()
}

#[test]
fn flat_exponent_gives_near_uniform_intents() {
    let c = TrafficConfig {
        zipf_exponent: 0.0,
        ..cfg(100_000)
    };
    let counts = rank_counts(&c);
    let (max, min) = (*counts.iter().max().unwrap(), *counts.iter().min().unwrap());
    assert!((max as f64) / (min as f64) < 1.3, "{max} / {min}");
}

#[test]
fn zipf_head_to_rank_twenty_ratio() {
    let c = cfg(100_000);
    let counts = rank_counts(&c);
    let want = 20f64.powf(1.2);
    let got = counts[0] as f64 / counts[19] as f64;
    assert!((got / want - 1.0).abs() < 0.10, "ratio {got}, analytic {want}");
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let c = cfg(2_000);
    let ma = datagen::generate(&c, &a).unwrap();
    let mb = datagen::generate(&c, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ma.sha256, mb.sha256);

    let other = datagen::generate(&TrafficConfig { seed: 8, ..c }, &b).unwrap();
    assert_ne!(other.sha256, ma.sha256);
}

#[test]
fn manifest_matches_file_contents() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let m = datagen::generate(&cfg(3_000), &path).unwrap();
    let loaded = DatasetManifest::load(&DatasetManifest::sidecar_path(&path)).unwrap();
    assert_eq!(loaded, m);
    let samples = datagen::read_dataset(&path).unwrap();
    assert_eq!(loaded.sample_count, samples.len());
    assert_eq!(loaded.per_intent_counts, intent_counts(&samples));
    assert_eq!(loaded.sha256, datagen::dataset_hash(&samples));
    assert_eq!(loaded.format_version, datagen::FORMAT_VERSION);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrafficConfig {
            hypotheses_range: (3, 2),
            ..cfg(10)
        },
        TrafficConfig {
            utterance_length_range: (0, 4),
            ..cfg(10)
        },
        TrafficConfig {
            label_noise_rate: 1.5,
            ..cfg(10)
        },
        TrafficConfig {
            tail_intents: vec!["intent_99".into()],
            ..cfg(10)
        },
    ];
    for c in bad {
        assert!(matches!(datagen::generate_samples(&c), Err(Error::Config(_))));
    }
}

/// Clean labels follow one skill per (intent, device); noise breaks that
/// for a share of samples without breaking sample invariants.
#[test]
fn label_noise_moves_the_ground_truth() {
    let rule = |s: &skillslice::backbone::Sample| {
        (s.ground_truth_intent.clone(), s.signals.device_type)
    };
    let clean = datagen::generate_samples(&cfg(4_000)).unwrap();
    let mut map = BTreeMap::new();
    for s in &clean {
        let skill = s.hypotheses[s.ground_truth_index].skill;
        assert_eq!(*map.entry(rule(s)).or_insert(skill), skill);
    }
    let noisy = datagen::generate_samples(&TrafficConfig {
        label_noise_rate: 0.5,
        ..cfg(4_000)
    })
    .unwrap();
    let mut moved = 0;
    for s in &noisy {
        s.check().unwrap();
        if map.get(&rule(s)).is_some_and(|&k| k != s.hypotheses[s.ground_truth_index].skill) {
            moved += 1;
        }
    }
    assert!(moved > 600 && moved < 2_000, "{moved}");
}

#[test]
fn split_examples() {
    let data = datagen::generate_samples(&cfg(100)).unwrap();
    let (train, val) = datagen::split(&data, 0.9, 3).unwrap();
    assert_eq!((train.len(), val.len()), (90, 10));
    assert_eq!(datagen::split(&data, 0.9, 3).unwrap(), (train, val));
    assert!(matches!(datagen::split(&data, 1.0, 3), Err(Error::Split(_))));
    assert!(matches!(datagen::split(&data, 0.0, 3), Err(Error::Split(_))));
    assert!(matches!(datagen::split(&data[..1], 0.5, 3), Err(Error::Split(_))));
}

#[test]
fn upsampling_examples() {
    let data = datagen::generate_samples(&cfg(4_000)).unwrap();
    let slices = SliceConfig::new(vec!["intent_04".into(), "intent_40".into()]).unwrap();
    let before = intent_counts(&data);

    let (same, w) = datagen::upsample(&data, &slices, 1.0, 5).unwrap();
    assert!(w.is_empty());
    let mut a: Vec<_> = same.iter().map(|s| s.id.clone()).collect();
    let mut b: Vec<_> = data.iter().map(|s| s.id.clone()).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);

    let (up, _) = datagen::upsample(&data, &slices, 3.0, 5).unwrap();
    let after = intent_counts(&up);
    for (intent, n) in &before {
        let want = if slices.slice_of(intent).is_some_and(|i| i > 0) { 3 * n } else { *n };
        assert_eq!(after[intent], want, "{intent}");
    }

    let small: Vec<_> = data.iter().filter(|s| s.ground_truth_intent == "intent_04").take(10).cloned().collect();
    let (up, _) = datagen::upsample(&small, &slices, 3.0, 1).unwrap();
    assert_eq!(up.len(), 30);

    let (_, w) = datagen::upsample(&small, &slices, 2.0, 1).unwrap();
    assert_eq!(w.len(), 1);
    assert!(datagen::upsample(&data, &slices, 0.5, 1).is_err());
    assert!(datagen::upsample(&data, &slices, f64::NAN, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_a_partition(n in 2usize..300, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let data = datagen::generate_samples(&cfg(n)).unwrap();
        prop_assume!(datagen::split(&data, ratio, seed).is_ok());
        let (a, b) = datagen::split(&data, ratio, seed).unwrap();
        prop_assert_eq!(a.len() + b.len(), n);
        let mut ids: Vec<_> = a.iter().chain(&b).map(|s| s.id.clone()).collect();
        ids.sort();
        let mut want: Vec<_> = data.iter().map(|s| s.id.clone()).collect();
        want.sort();
        prop_assert_eq!(ids, want);
    }

    #[test]
    fn upsampling_only_renames_copies(mult in 1.0f64..4.0, seed in any::<u64>()) {
        let data = datagen::generate_samples(&cfg(600)).unwrap();
        let slices = cfg(0).slice_config().unwrap();
        let (up, _) = datagen::upsample(&data, &slices, mult, seed).unwrap();
        let by_id: BTreeMap<_, _> = data.iter().map(|s| (s.id.clone(), s)).collect();
        for s in &up {
            let src = by_id[s.id.split('#').next().unwrap()];
            let mut renamed = s.clone();
            renamed.id = src.id.clone();
            prop_assert_eq!(&renamed, src);
        }
    }
}
