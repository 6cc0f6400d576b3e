//! Helpers shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skillslice::backbone::{self, BackboneConfig, BackboneParams, BoundBackbone, Hypothesis, QuerySignals, Sample};
use skillslice::numerics::lstm::{self, BoundLstm, LstmParams};
use skillslice::numerics::{Elementwise, Graph, Tensor, Var};
use skillslice::slice_aware::{self, AttentionConfig, AttentionMethod, BoundHeads, LossWeights, SliceAwareModel, SliceOptions};
use skillslice::slicing::SliceLabelVector;
use skillslice::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so `abs` is differentiable at every draw.
pub fn rand_nonzero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

/// Reduces any output to a scalar through fixed pseudo-random weights so the
/// whole Jacobian is exercised.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let mut r = rng(0xC0FFEE);
    let coeffs = rand_tensor(&shape, -1.0, 1.0, &mut r);
    let c = g.constant(&coeffs);
    let m = g.mul(out, c)?;
    Ok(g.sum(m))
}

/// Relative error with a floor of 1e-3 on the denominator, so gradients
/// that are zero up to rounding compare by absolute error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every element of `inputs`.
pub fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars).unwrap();
    let out = project(&mut g, out).unwrap();
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vs).unwrap();
        let out = project(&mut g, out).unwrap();
        g.scalar(out)
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].values()[j];
            work[i].values_mut()[j] = x + h;
            let up = eval(&work);
            work[i].values_mut()[j] = x - h;
            let down = eval(&work);
            work[i].values_mut()[j] = x;
            let num = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i][j], num));
        }
    }
    worst
}

pub fn bound_lstm(vars: &[Var], hidden: usize) -> BoundLstm {
    BoundLstm {
        w_input: vars[0],
        w_hidden: vars[1],
        bias: vars[2],
        hidden,
    }
}

pub fn lstm_tensors(p: &LstmParams) -> Vec<Tensor> {
    p.tensors().into_iter().cloned().collect()
}

/// Rebuilds a bound backbone from leaf variables in `tensors()` order.
pub fn bound_backbone(v: &[Var], hidden: usize) -> BoundBackbone {
    BoundBackbone {
        token_embedding: v[0],
        forward: bound_lstm(&v[1..4], hidden),
        backward: bound_lstm(&v[4..7], hidden),
        pool_context: v[7],
        device_embedding: v[8],
        context_embedding: v[9],
        skill_embedding: v[10],
        interpretation_embedding: v[11],
        fuse_query: v[12],
        fuse_hypothesis: v[13],
        fuse_bias: v[14],
        predict_weight: v[15],
        predict_bias: v[16],
    }
}

/// Rebuilds bound slice heads from leaf variables in `tensors()` order.
pub fn bound_heads(v: &[Var], k: usize, d: usize, max_hypotheses: usize) -> BoundHeads {
    BoundHeads {
        indicator_weight: v[0],
        indicator_bias: v[1],
        expert_weight: v[2],
        expert_bias: v[3],
        shared_weight: v[4],
        shared_bias: v[5],
        final_weight: v[6],
        final_bias: v[7],
        q_weight: v[8],
        q_bias: v[9],
        k,
        d,
        max_hypotheses,
    }
}

pub fn tiny_backbone_config(d: usize) -> BackboneConfig {
    BackboneConfig {
        vocab_size: 12,
        num_devices: 3,
        num_context: 4,
        num_skills: 6,
        num_interpretation: 6,
        token_dim: 3,
        categorical_dim: 2,
        lstm_hidden: 2,
        d,
    }
}

pub fn random_sample(cfg: &BackboneConfig, n: usize, intent_of: &dyn Fn(usize) -> String, rng: &mut impl Rng) -> Sample {
    let len = rng.random_range(1..=4);
    let hypotheses: Vec<Hypothesis> = (0..n)
        .map(|i| Hypothesis {
            intent: intent_of(i),
            skill: rng.random_range(0..cfg.num_skills),
            interpretation_features: (0..rng.random_range(0..=2))
                .map(|_| rng.random_range(0..cfg.num_interpretation))
                .collect(),
        })
        .collect();
    let truth = rng.random_range(0..n);
    Sample {
        id: format!("r{}", rng.random::<u32>()),
        signals: QuerySignals {
            utterance_tokens: (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect(),
            device_type: rng.random_range(0..cfg.num_devices),
            shared_context: (0..rng.random_range(0..=2))
                .map(|_| rng.random_range(0..cfg.num_context))
                .collect(),
        },
        ground_truth_intent: hypotheses[truth].intent.clone(),
        hypotheses,
        ground_truth_index: truth,
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One random instance of every differentiable operation, keyed by name.
fn op_instances(r: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    let m = r.random_range(1..=4);
    let n = r.random_range(1..=4);
    let p = r.random_range(1..=4);
    let t = |shape: &[usize], r: &mut ChaCha8Rng| rand_tensor(shape, -1.5, 1.5, r);
    let tau = if r.random_bool(0.5) { 1.0 } else { 0.1 };
    let mut v: Vec<(&'static str, Vec<Tensor>, Builder)> = Vec::new();
    v.push(("matmul", vec![t(&[m, n], r), t(&[n, p], r)], Box::new(|g, x| g.matmul(x[0], x[1]))));
    v.push(("add", vec![t(&[m, n], r), t(&[m, n], r)], Box::new(|g, x| g.add(x[0], x[1]))));
    v.push(("sub", vec![t(&[m, n], r), t(&[m, n], r)], Box::new(|g, x| g.sub(x[0], x[1]))));
    v.push(("mul", vec![t(&[m, n], r), t(&[m, n], r)], Box::new(|g, x| g.mul(x[0], x[1]))));
    v.push(("abs", vec![rand_nonzero(&[m, n], r)], Box::new(|g, x| Ok(g.abs(x[0])))));
    let c = r.random_range(-2.0..2.0);
    v.push(("scale", vec![t(&[m, n], r)], Box::new(move |g, x| Ok(g.scale(x[0], c)))));
    v.push((
        "elementwise",
        vec![t(&[m, n], r), t(&[m, n], r)],
        Box::new(|g, x| {
            let a = g.elementwise(Elementwise::Mul, x[0], Some(x[1]))?;
            g.elementwise(Elementwise::Sub, a, Some(x[1]))
        }),
    ));
    v.push(("add_bias", vec![t(&[m, n], r), t(&[n], r)], Box::new(|g, x| g.add_bias(x[0], x[1]))));
    v.push(("sigmoid", vec![t(&[m, n], r)], Box::new(|g, x| Ok(g.sigmoid(x[0])))));
    v.push(("tanh", vec![t(&[m, n], r)], Box::new(|g, x| Ok(g.tanh(x[0])))));
    v.push(("softmax_temp", vec![t(&[m, n], r)], Box::new(move |g, x| g.softmax_rows(x[0], tau))));
    let target: Vec<f64> = (0..m * n).map(|_| r.random_range(0.0..=1.0)).collect();
    let weights: Vec<f64> = (0..m * n).map(|_| r.random_range(0.0..1.0)).collect();
    v.push((
        "bce_loss",
        vec![t(&[m, n], r)],
        Box::new(move |g, x| {
            let p = g.sigmoid(x[0]);
            let a = g.bce_loss(p, &target)?;
            let b = g.bce_weighted(p, &target, &weights)?;
            g.add(a, b)
        }),
    ));
    v.push(("sum", vec![t(&[m, n], r)], Box::new(|g, x| Ok(g.sum(x[0])))));
    v.push(("row_sum", vec![t(&[m, n], r)], Box::new(|g, x| Ok(g.row_sum(x[0])))));
    v.push(("mul_rows", vec![t(&[m, n], r), t(&[m], r)], Box::new(|g, x| g.mul_rows(x[0], x[1]))));
    let rows: Vec<Option<usize>> = (0..p + 2)
        .map(|_| r.random_bool(0.8).then(|| r.random_range(0..m)))
        .collect();
    v.push(("gather_rows", vec![t(&[m, n], r)], Box::new(move |g, x| g.gather_rows(x[0], &rows))));
    let flat: Vec<Option<usize>> = (0..p * 2)
        .map(|_| r.random_bool(0.8).then(|| r.random_range(0..m * n)))
        .collect();
    v.push(("gather", vec![t(&[m, n], r)], Box::new(move |g, x| g.gather(x[0], &flat, &[p, 2]))));
    v.push((
        "concat_cols",
        vec![t(&[m, n], r), t(&[m, p], r)],
        Box::new(|g, x| g.concat_cols(&[x[0], x[1]])),
    ));
    v.push((
        "concat_rows",
        vec![t(&[m, n], r), t(&[p, n], r)],
        Box::new(|g, x| g.concat_rows(&[x[0], x[1]])),
    ));
    let (s0, s1) = {
        let a = r.random_range(0..n);
        (a, r.random_range(a + 1..=n))
    };
    v.push(("slice_cols", vec![t(&[m, n], r)], Box::new(move |g, x| g.slice_cols(x[0], s0, s1))));
    v.push(("reshape", vec![t(&[m, n], r)], Box::new(move |g, x| g.reshape(x[0], &[n, m]))));
    v.push(("transpose", vec![t(&[m, n], r)], Box::new(|g, x| g.transpose(x[0]))));
    let rows_total = m + p;
    let mut seg: Vec<usize> = (0..rows_total).map(|_| r.random_range(0..3)).collect();
    seg.sort_unstable();
    let nseg = seg.iter().max().unwrap() + 1;
    let segc = seg.clone();
    v.push((
        "segment_softmax",
        vec![t(&[rows_total, 1], r)],
        Box::new(move |g, x| g.segment_softmax(x[0], &segc)),
    ));
    let w: Vec<f64> = (0..rows_total).map(|_| r.random_range(0.1..1.0)).collect();
    v.push((
        "segment_sum",
        vec![t(&[rows_total, n], r)],
        Box::new(move |g, x| g.segment_sum(x[0], &seg, nseg, Some(&w))),
    ));
    let (e, h, steps) = (r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=4));
    let mut inputs = vec![t(&[steps, e], r)];
    inputs.extend(lstm_tensors(&LstmParams::init(e, h, r)));
    inputs.extend(lstm_tensors(&LstmParams::init(e, h, r)));
    v.push((
        "recurrent_encode",
        inputs,
        Box::new(move |g, x| {
            let (f, b) = (bound_lstm(&x[1..4], h), bound_lstm(&x[4..7], h));
            lstm::recurrent_encode(g, x[0], &f, &b)
        }),
    ));
    let vocab = 5;
    let seqs: Vec<Vec<usize>> = (0..r.random_range(1..=3))
        .map(|_| (0..r.random_range(1..=4)).map(|_| r.random_range(0..vocab)).collect())
        .collect();
    let mut inputs = vec![t(&[vocab, e], r)];
    inputs.extend(lstm_tensors(&LstmParams::init(e, h, r)));
    inputs.extend(lstm_tensors(&LstmParams::init(e, h, r)));
    v.push((
        "encode_token_batch",
        inputs,
        Box::new(move |g, x| {
            let (f, b) = (bound_lstm(&x[1..4], h), bound_lstm(&x[4..7], h));
            let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
            Ok(lstm::encode_token_batch(g, x[0], &refs, &f, &b)?.0)
        }),
    ));
    v
}

/// Worst relative error per operation over `trials` random shapes.
pub fn op_gradient_suite(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for _ in 0..trials {
        for (name, inputs, f) in op_instances(&mut r) {
            let e = gradcheck(&inputs, &*f);
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((name, e)),
            }
        }
    }
    worst
}

/// Worst relative error of the full per-sample objective over every
/// backbone and slice parameter plus the representation noise, for a model
/// with `k` slices, width `d` and `n` hypotheses.
pub fn full_model_gradcheck(
    method: skillslice::slice_aware::AttentionMethod,
    k: usize,
    d: usize,
    n: usize,
    seed: u64,
) -> f64 {
    let mut r = rng(seed);
    let cfg = tiny_backbone_config(d);
    let mut bb = BackboneParams::init(cfg.clone(), &mut r).unwrap();
    // move π off its Xavier draw so the base term is not special
    for v in bb.predict_bias.values_mut() {
        *v = 0.3;
    }
    let attention = skillslice::slice_aware::AttentionConfig::new(method, 0.5).unwrap();
    let options = skillslice::slice_aware::SliceOptions {
        warm_start: false,
        max_hypotheses: n + 1,
        ..Default::default()
    };
    let mut model = SliceAwareModel::new(bb.clone(), k, attention, options, &mut r).unwrap();
    for t in model.heads.tensors_mut() {
        for v in t.values_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let sample = random_sample(&cfg, n, &|i| format!("i{i}"), &mut r);
    let mut gamma = vec![0u8; k];
    gamma[r.random_range(0..k)] = 1;
    let gamma = SliceLabelVector::from(gamma);
    let noise = rand_tensor(&[n, d], -0.01, 0.01, &mut r);

    let mut inputs: Vec<Tensor> = bb.tensors_mut().into_iter().map(|t| t.clone()).collect();
    inputs.extend(model.heads.tensors().into_iter().cloned());
    inputs.push(noise);
    let nb = bb.tensors().len();
    let maxh = model.heads.max_hypotheses();
    let m = model.clone();
    gradcheck(&inputs, &move |g, v| {
        let b = bound_backbone(&v[..nb], cfg.lstm_hidden);
        let h = bound_heads(&v[nb..nb + 10], k, d, maxh);
        let enc = skillslice::backbone::encode_batch(g, &m.backbone, &b, &[&sample])?;
        let x = g.add(enc.x, v[nb + 10])?;
        Ok(slice_aware::total_loss(g, &m, &b, &h, x, &gamma, sample.ground_truth_index)?.total)
    })
}

pub const METHODS: [AttentionMethod; 2] = [AttentionMethod::IndicatorOnly, AttentionMethod::IndicatorPlusExpert];

pub fn slice_model(k: usize, d: usize, method: AttentionMethod, tau: f64, lw: LossWeights, seed: u64) -> SliceAwareModel {
    let mut r = rng(seed);
    let bb = BackboneParams::init(tiny_backbone_config(d), &mut r).unwrap();
    let options = SliceOptions {
        loss_weights: lw,
        warm_start: false,
        max_hypotheses: 5,
        ..SliceOptions::default()
    };
    let mut m = SliceAwareModel::new(bb, k, AttentionConfig::new(method, tau).unwrap(), options, &mut r).unwrap();
    for t in m.heads.tensors_mut() {
        for v in t.values_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
    m
}

pub fn slice_batch(m: &SliceAwareModel, size: usize, seed: u64) -> (Vec<Sample>, Vec<SliceLabelVector>) {
    let mut r = rng(seed);
    let k = m.k();
    let samples: Vec<Sample> = (0..size)
        .map(|_| {
            let n = r.random_range(1..=4);
            random_sample(&m.backbone.config, n, &|i| format!("i{i}"), &mut r)
        })
        .collect();
    let gammas = samples
        .iter()
        .map(|_| {
            let mut g = vec![0u8; k];
            g[r.random_range(0..k)] = 1;
            SliceLabelVector::from(g)
        })
        .collect();
    (samples, gammas)
}

/// Expert `i` gets bitwise-zero expert-loss gradients whenever no sample in
/// the batch belongs to slice `i`.
pub fn masking_violations(batches: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut violations = 0;
    for t in 0..batches {
        let k = r.random_range(2..=5);
        let m = slice_model(k, 4, METHODS[t % 2], 1.0, LossWeights::only_expert(), seed + t as u64);
        let (samples, mut gammas) = slice_batch(&m, r.random_range(1..=6), seed ^ t as u64);
        let absent = r.random_range(0..k);
        for gm in gammas.iter_mut() {
            let mut v = gm.as_slice().to_vec();
            if v[absent] == 1 {
                v[absent] = 0;
                v[(absent + 1) % k] = 1;
            }
            *gm = SliceLabelVector::from(v);
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut g = Graph::new();
        let bb = m.backbone.bind(&mut g, false);
        let h = m.heads.bind(&mut g, true);
        let enc = backbone::encode_batch(&mut g, &m.backbone, &bb, &refs).unwrap();
        let fwd = slice_aware::forward_batch(&mut g, &m, &bb, &h, enc.x, &enc.layout).unwrap();
        let gref: Vec<&SliceLabelVector> = gammas.iter().collect();
        let truth: Vec<usize> = samples.iter().map(|s| s.ground_truth_index).collect();
        let l = slice_aware::batch_loss(&mut g, &m, &fwd, &enc.layout, &gref, &truth).unwrap();
        g.backward(l.total).unwrap();
        let d = 4;
        let w = g.grad(h.expert_weight).unwrap();
        let b = g.grad(h.expert_bias).unwrap();
        let masked = w[absent * d * d..(absent + 1) * d * d].iter().chain(&b[absent * d..(absent + 1) * d]);
        if masked.clone().any(|x| x.to_bits() != 0) {
            violations += 1;
        }
    }
    violations
}

pub fn attention_of(method: AttentionMethod, p: &[f64], q: &[f64], n: usize, tau: f64) -> Vec<f64> {
    let k = p.len();
    let mut heads = slice_aware::SliceHeads::zeros(k, 2, 6);
    heads.q_weight.values_mut()[0] = 1.0;
    heads.q_weight.values_mut()[1] = -0.5;
    let mut g = Graph::new();
    let h = heads.bind(&mut g, false);
    let pv = g.constant(&Tensor::matrix(1, k, p.to_vec()).unwrap());
    let qv = g.constant(&Tensor::matrix(k, n, q.to_vec()).unwrap());
    let a = slice_aware::attention_weights(&mut g, pv, qv, &AttentionConfig::new(method, tau).unwrap(), &h).unwrap();
    g.value(a).to_vec()
}
