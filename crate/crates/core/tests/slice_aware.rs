mod common;

use proptest::prelude::*;
use rand::Rng;

use skillslice::backbone::{self, BackboneParams, HypothesisLayout, Sample};
use skillslice::harness::checkpoint::param_hash;
use skillslice::harness::{train_slice_aware, ExperimentConfig};
use skillslice::numerics::{Graph, Tensor};
use skillslice::slice_aware::{
    self, augment_tail, AttentionConfig, AttentionMethod, LossWeights, NoiseScale, SliceAwareModel, SliceOptions,
};
use skillslice::slicing::{SliceConfig, SliceLabelVector};

#[test]
fn full_objective_matches_finite_differences() {
    for method in common::METHODS {
        for seed in 0..3 {
            let err = common::full_model_gradcheck(method, 3, 8, 4, seed);
            assert!(err < 1e-3, "{method:?} seed {seed}: {err:e}");
        }
    }
}

/// The batched training path against the per-sample reference ops: same
/// scores, same objective, same parameter gradients.
#[test]
fn batched_path_matches_reference() {
    for method in common::METHODS {
        let m = common::slice_model(4, 6, method, 0.7, LossWeights::default(), 5);
        let (samples, gammas) = common::slice_batch(&m, 6, 8);
        let refs: Vec<&Sample> = samples.iter().collect();

        let mut g = Graph::new();
        let bb = m.backbone.bind(&mut g, true);
        let h = m.heads.bind(&mut g, true);
        let enc = backbone::encode_batch(&mut g, &m.backbone, &bb, &refs).unwrap();
        let fwd = slice_aware::forward_batch(&mut g, &m, &bb, &h, enc.x, &enc.layout).unwrap();
        let gref: Vec<&SliceLabelVector> = gammas.iter().collect();
        let truth: Vec<usize> = samples.iter().map(|s| s.ground_truth_index).collect();
        let losses = slice_aware::batch_loss(&mut g, &m, &fwd, &enc.layout, &gref, &truth).unwrap();
        g.backward(losses.total).unwrap();
        let batched_grads: Vec<Vec<f64>> = h.vars().iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
        let final_scores = g.value(fwd.final_scores).to_vec();
        let attention = g.value(fwd.attention).to_vec();
        let total = g.scalar(losses.total);

        let k = m.k();
        let mut mean_total = 0.0;
        let mut mean_grads: Vec<Vec<f64>> = batched_grads.iter().map(|v| vec![0.0; v.len()]).collect();
        for (b, s) in samples.iter().enumerate() {
            let mut g = Graph::new();
            let bb = m.backbone.bind(&mut g, true);
            let h = m.heads.bind(&mut g, true);
            let x = backbone::encode_batch(&mut g, &m.backbone, &bb, &[s]).unwrap().x;
            let l = slice_aware::total_loss(&mut g, &m, &bb, &h, x, &gammas[b], s.ground_truth_index).unwrap();
            mean_total += g.scalar(l.total) / samples.len() as f64;
            g.backward(l.total).unwrap();
            for (acc, v) in mean_grads.iter_mut().zip(h.vars()) {
                for (a, x) in acc.iter_mut().zip(g.grad(v).unwrap()) {
                    *a += x / samples.len() as f64;
                }
            }
            // reference scores and attention
            let mut g = Graph::new();
            let bb = m.backbone.bind(&mut g, false);
            let h = m.heads.bind(&mut g, false);
            let x = backbone::encode_batch(&mut g, &m.backbone, &bb, &[s]).unwrap().x;
            let p = slice_aware::indicator_forward(&mut g, x, &h).unwrap();
            let reps = slice_aware::expert_forward(&mut g, x, &h).unwrap();
            let q = slice_aware::expert_scores(&mut g, &reps, &h).unwrap();
            let a = slice_aware::attention_weights(&mut g, p, q, &m.attention, &h).unwrap();
            let sr = slice_aware::slice_representation(&mut g, &reps, a).unwrap();
            let fin = slice_aware::predict_final(&mut g, sr, &h, m.options.final_head).unwrap();
            for (i, v) in g.value(a).iter().enumerate() {
                assert!((v - attention[b * k + i]).abs() < 1e-12);
            }
            let rows = enc.layout.rows(b);
            for (x, y) in g.value(fin).iter().zip(&final_scores[rows]) {
                assert!((x - y).abs() < 1e-12, "{method:?}: {x} vs {y}");
            }
        }
        assert!((total - mean_total).abs() < 1e-12);
        for (a, b) in batched_grads.iter().zip(&mean_grads) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-10, "{method:?}: grad {x} vs {y}");
            }
        }
    }
}

#[test]
fn total_is_the_sum_of_terms() {
    let m = common::slice_model(3, 5, AttentionMethod::IndicatorPlusExpert, 1.0, LossWeights::default(), 2);
    let (samples, gammas) = common::slice_batch(&m, 4, 3);
    for (s, gm) in samples.iter().zip(&gammas) {
        let mut g = Graph::new();
        let bb = m.backbone.bind(&mut g, false);
        let h = m.heads.bind(&mut g, false);
        let x = backbone::encode_batch(&mut g, &m.backbone, &bb, &[s]).unwrap().x;
        let l = slice_aware::total_loss(&mut g, &m, &bb, &h, x, gm, s.ground_truth_index).unwrap();
        let sum = g.scalar(l.base) + g.scalar(l.indicator) + g.scalar(l.expert) + g.scalar(l.final_);
        assert!((g.scalar(l.total) - sum).abs() < 1e-12);
    }
}

/// Heads that a loss term cannot reach get no gradient from it.
#[test]
fn loss_weights_isolate_terms() {
    let grads = |lw: LossWeights| {
        let m = common::slice_model(3, 5, AttentionMethod::IndicatorOnly, 1.0, lw, 4);
        let (samples, gammas) = common::slice_batch(&m, 5, 6);
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut g = Graph::new();
        let bb = m.backbone.bind(&mut g, true);
        let h = m.heads.bind(&mut g, true);
        let enc = backbone::encode_batch(&mut g, &m.backbone, &bb, &refs).unwrap();
        let fwd = slice_aware::forward_batch(&mut g, &m, &bb, &h, enc.x, &enc.layout).unwrap();
        let gref: Vec<&SliceLabelVector> = gammas.iter().collect();
        let truth: Vec<usize> = samples.iter().map(|s| s.ground_truth_index).collect();
        let l = slice_aware::batch_loss(&mut g, &m, &fwd, &enc.layout, &gref, &truth).unwrap();
        g.backward(l.total).unwrap();
        let norm = |v| g.grad(v).unwrap().iter().map(|x: &f64| x.abs()).sum::<f64>();
        (
            norm(h.indicator_weight),
            norm(h.expert_weight),
            norm(h.shared_weight),
            norm(h.final_weight),
            norm(bb.predict_weight),
        )
    };
    let (ind, exp, shared, fin, pi) = grads(LossWeights::only_indicator());
    assert!(ind > 0.0);
    assert_eq!((exp, shared, fin, pi), (0.0, 0.0, 0.0, 0.0));
    let (ind, exp, shared, fin, pi) = grads(LossWeights::only_expert());
    assert!(exp > 0.0 && shared > 0.0);
    assert_eq!((ind, fin, pi), (0.0, 0.0, 0.0));
}

#[test]
fn expert_masking_is_exact() {
    assert_eq!(common::masking_violations(100, 17), 0);
}

#[test]
fn masked_gradient_example() {
    // γ = [0, 1]: slice 0's expert receives no gradient from the expert loss
    let m = common::slice_model(2, 4, AttentionMethod::IndicatorOnly, 1.0, LossWeights::only_expert(), 1);
    let (samples, _) = common::slice_batch(&m, 1, 2);
    let s = &samples[0];
    let mut g = Graph::new();
    let bb = m.backbone.bind(&mut g, false);
    let h = m.heads.bind(&mut g, true);
    let x = backbone::encode_batch(&mut g, &m.backbone, &bb, &[s]).unwrap().x;
    let gamma = SliceLabelVector::from(vec![0, 1]);
    let l = slice_aware::total_loss(&mut g, &m, &bb, &h, x, &gamma, s.ground_truth_index).unwrap();
    g.backward(l.total).unwrap();
    let w = g.grad(h.expert_weight).unwrap();
    assert!(w[..16].iter().all(|v| v.to_bits() == 0));
    assert!(w[16..].iter().any(|&v| v != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn attention_is_a_distribution(
        k in 1usize..6, n in 1usize..6, tau in 0.05f64..2.0, seed in any::<u64>(), expert in any::<bool>()
    ) {
        let mut r = common::rng(seed);
        let p: Vec<f64> = (0..k).map(|_| r.random_range(0.0..1.0)).collect();
        let q: Vec<f64> = (0..k * n).map(|_| r.random_range(0.0..1.0)).collect();
        let method = common::METHODS[usize::from(expert)];
        let a = common::attention_of(method, &p, &q, n, tau);
        prop_assert!(a.iter().all(|&x| x >= 0.0));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        if k == 1 {
            prop_assert_eq!(a, vec![1.0]);
        }
    }

    #[test]
    fn lower_temperature_sharpens_the_argmax(
        k in 2usize..6, n in 1usize..5, t1 in 0.1f64..2.0, t2 in 0.1f64..2.0, seed in any::<u64>(), expert in any::<bool>()
    ) {
        prop_assume!((t1 - t2).abs() > 1e-3);
        let (hi, lo) = if t1 > t2 { (t1, t2) } else { (t2, t1) };
        let mut r = common::rng(seed);
        let p: Vec<f64> = (0..k).map(|_| r.random_range(0.0..1.0)).collect();
        let q: Vec<f64> = (0..k * n).map(|_| r.random_range(0.0..1.0)).collect();
        let method = common::METHODS[usize::from(expert)];
        let a_hi = common::attention_of(method, &p, &q, n, hi);
        let a_lo = common::attention_of(method, &p, &q, n, lo);
        let arg = backbone::select_hypothesis(&a_hi);
        prop_assume!(a_hi.iter().enumerate().all(|(i, &v)| i == arg || v < a_hi[arg] - 1e-9));
        prop_assert_eq!(backbone::select_hypothesis(&a_lo), arg);
        prop_assert!(a_lo[arg] > a_hi[arg]);
    }

    #[test]
    fn slice_representation_is_convex(k in 1usize..5, n in 1usize..4, d in 1usize..5, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let logits: Vec<f64> = (0..k).map(|_| r.random_range(-3.0..3.0)).collect();
        let reps: Vec<Tensor> = (0..k).map(|_| common::rand_tensor(&[n, d], -2.0, 2.0, &mut r)).collect();
        let mut g = Graph::new();
        let lv = g.constant(&Tensor::matrix(1, k, logits).unwrap());
        let a = g.softmax_rows(lv, 1.0).unwrap();
        let rv: Vec<_> = reps.iter().map(|t| g.constant(t)).collect();
        let s = slice_aware::slice_representation(&mut g, &rv, a).unwrap();
        for (j, &v) in g.value(s).iter().enumerate() {
            let lo = reps.iter().map(|t| t.values()[j]).fold(f64::INFINITY, f64::min);
            let hi = reps.iter().map(|t| t.values()[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}

#[test]
fn warm_start_reproduces_backbone_scores() {
    let mut r = common::rng(21);
    let bb = BackboneParams::init(common::tiny_backbone_config(6), &mut r).unwrap();
    for method in common::METHODS {
        let m = SliceAwareModel::new(
            bb.clone(),
            4,
            AttentionConfig::new(method, 0.3).unwrap(),
            SliceOptions::default(),
            &mut r,
        )
        .unwrap();
        let (samples, _) = common::slice_batch(&m, 8, 4);
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut g = Graph::new();
        let b = m.backbone.bind(&mut g, false);
        let h = m.heads.bind(&mut g, false);
        let enc = backbone::encode_batch(&mut g, &m.backbone, &b, &refs).unwrap();
        let fwd = slice_aware::forward_batch(&mut g, &m, &b, &h, enc.x, &enc.layout).unwrap();
        for (x, y) in g.value(fwd.final_scores).iter().zip(g.value(fwd.base_scores)) {
            assert!((x - y).abs() < 1e-12);
        }
        let _ = HypothesisLayout::new([1]);
    }
}

#[test]
fn augmentation_noise_statistics() {
    let mut r = common::rng(5);
    let x = Tensor::zeros(&[1000, 1000]);
    let tail = SliceLabelVector::from(vec![0, 1]);
    let out = augment_tail(&x, &tail, 0.005, &mut r).unwrap();
    let n = out.len() as f64;
    let mean = out.values().iter().sum::<f64>() / n;
    let std = (out.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 5e-5, "mean {mean}");
    assert!((std / 0.005 - 1.0).abs() < 0.01, "std {std}");

    let base = SliceLabelVector::from(vec![1, 0]);
    assert_eq!(augment_tail(&x, &base, 0.005, &mut r).unwrap(), x);
    assert_eq!(augment_tail(&x, &tail, 0.0, &mut r).unwrap(), x);
    assert!(augment_tail(&x, &tail, -0.1, &mut r).is_err());

    let opts = SliceOptions {
        noise_scale: NoiseScale::Variance,
        ..SliceOptions::default()
    };
    assert!((opts.noise_std() - 0.005f64.sqrt()).abs() < 1e-15);
}

#[test]
fn frozen_backbone_is_untouched_by_training() {
    let mut cfg = ExperimentConfig::default();
    cfg.d = 8;
    cfg.lstm_hidden = 4;
    cfg.token_dim = 4;
    cfg.categorical_dim = 4;
    cfg.epochs = 2;
    cfg.batch_size = 32;
    cfg.traffic.num_samples = 300;
    let data = skillslice::datagen::generate_samples(&cfg.traffic).unwrap();
    let (train, val) = skillslice::datagen::split(&data, 0.9, 1).unwrap();
    let slices: SliceConfig = cfg.slice_config().unwrap();
    let bb = BackboneParams::init(cfg.backbone_config(), &mut common::rng(3)).unwrap();
    let before = param_hash(&bb.named());
    let (trained, report) = train_slice_aware(&cfg, bb.clone(), &slices, &train, &val).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert_eq!(param_hash(&trained.backbone.named()), before);
    assert_eq!(trained.backbone, bb);
    assert_ne!(param_hash(&trained.heads.named()), {
        let fresh = SliceAwareModel::new(bb, slices.k(), cfg.attention, cfg.slice.clone(), &mut common::rng(0)).unwrap();
        param_hash(&fresh.heads.named())
    });
}
