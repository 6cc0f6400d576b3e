//! The baseline routing model: encodes a query and its hypothesis list into
//! one `d`-wide row per hypothesis and scores every row independently.
//!
//! Query side: token embeddings run through a bidirectional LSTM and are
//! pooled by dot-product attention against a learned context vector, then
//! joined with the device embedding and the mean shared-context embedding.
//! Hypothesis side: skill embedding next to the mean interpretation-feature
//! embedding. The two are fused by one `tanh` layer into `x`, and the linear
//! predictive layer maps each row of `x` to a routing score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::lstm::{self, BiLstmParams, BoundLstm, LstmParams};
use crate::numerics::{init, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuerySignals {
    pub utterance_tokens: Vec<usize>,
    pub device_type: usize,
    #[serde(default)]
    pub shared_context: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hypothesis {
    pub intent: String,
    pub skill: usize,
    pub interpretation_features: Vec<usize>,
}

/// One routing query with its candidate list and production choice.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub signals: QuerySignals,
    pub hypotheses: Vec<Hypothesis>,
    pub ground_truth_index: usize,
    pub ground_truth_intent: String,
}

impl Sample {
    pub fn num_hypotheses(&self) -> usize {
        self.hypotheses.len()
    }

    /// Structural checks that do not depend on vocabulary sizes.
    pub fn check(&self) -> Result<()> {
        if self.signals.utterance_tokens.is_empty() {
            return Err(Error::Input(format!("sample {}: empty utterance", self.id)));
        }
        if self.hypotheses.is_empty() {
            return Err(Error::Input(format!("sample {}: no hypotheses", self.id)));
        }
        let gt = self.hypotheses.get(self.ground_truth_index).ok_or(Error::Index {
            index: self.ground_truth_index,
            len: self.hypotheses.len(),
        })?;
        if gt.intent != self.ground_truth_intent {
            return Err(Error::Input(format!(
                "sample {}: ground-truth intent {:?} but hypothesis {} has {:?}",
                self.id, self.ground_truth_intent, self.ground_truth_index, gt.intent
            )));
        }
        if self.hypotheses.iter().any(|h| h.intent.is_empty()) {
            return Err(Error::Input(format!("sample {}: empty hypothesis intent", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub num_devices: usize,
    pub num_context: usize,
    pub num_skills: usize,
    pub num_interpretation: usize,
    pub token_dim: usize,
    pub categorical_dim: usize,
    pub lstm_hidden: usize,
    /// Width of the per-hypothesis representation.
    pub d: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            num_devices: 4,
            num_context: 8,
            num_skills: 64,
            num_interpretation: 64,
            token_dim: 16,
            categorical_dim: 16,
            lstm_hidden: 24,
            d: 128,
        }
    }
}

impl BackboneConfig {
    fn query_width(&self) -> usize {
        2 * self.lstm_hidden + 2 * self.categorical_dim
    }

    fn hypothesis_width(&self) -> usize {
        2 * self.categorical_dim
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("num_devices", self.num_devices),
            ("num_context", self.num_context),
            ("num_skills", self.num_skills),
            ("num_interpretation", self.num_interpretation),
            ("token_dim", self.token_dim),
            ("categorical_dim", self.categorical_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("d", self.d),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone {name} must be positive")));
        }
        Ok(())
    }

    /// Checks every id in `s` against the configured inventories.
    pub fn check_sample(&self, s: &Sample) -> Result<()> {
        s.check()?;
        let bad = |what: &str, id: usize, len: usize| {
            Error::Input(format!("sample {}: {what} id {id} outside inventory of {len}", s.id))
        };
        if let Some(&t) = s.signals.utterance_tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(bad("token", t, self.vocab_size));
        }
        if s.signals.device_type >= self.num_devices {
            return Err(bad("device", s.signals.device_type, self.num_devices));
        }
        if let Some(&c) = s.signals.shared_context.iter().find(|&&c| c >= self.num_context) {
            return Err(bad("context", c, self.num_context));
        }
        for h in &s.hypotheses {
            if h.skill >= self.num_skills {
                return Err(bad("skill", h.skill, self.num_skills));
            }
            if let Some(&f) = h
                .interpretation_features
                .iter()
                .find(|&&f| f >= self.num_interpretation)
            {
                return Err(bad("interpretation", f, self.num_interpretation));
            }
        }
        Ok(())
    }
}

/// Parameters of the encoder `M` and the predictive layer `π`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub token_embedding: Tensor,
    pub lstm: BiLstmParams,
    /// `2h × 1` pooling context vector.
    pub pool_context: Tensor,
    pub device_embedding: Tensor,
    pub context_embedding: Tensor,
    pub skill_embedding: Tensor,
    pub interpretation_embedding: Tensor,
    /// Query half of the fusion layer.
    pub fuse_query: Tensor,
    /// Hypothesis half of the fusion layer.
    pub fuse_hypothesis: Tensor,
    pub fuse_bias: Tensor,
    /// `π`: `d × 1` weight and scalar bias.
    pub predict_weight: Tensor,
    pub predict_bias: Tensor,
}

pub const BACKBONE_TENSORS: [&str; 17] = [
    "backbone.token_embedding",
    "backbone.lstm.forward.w_input",
    "backbone.lstm.forward.w_hidden",
    "backbone.lstm.forward.bias",
    "backbone.lstm.backward.w_input",
    "backbone.lstm.backward.w_hidden",
    "backbone.lstm.backward.bias",
    "backbone.pool_context",
    "backbone.device_embedding",
    "backbone.context_embedding",
    "backbone.skill_embedding",
    "backbone.interpretation_embedding",
    "backbone.fuse_query",
    "backbone.fuse_hypothesis",
    "backbone.fuse_bias",
    "backbone.predict_weight",
    "backbone.predict_bias",
];

impl BackboneParams {
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let emb = |rows: usize, cols: usize, rng: &mut dyn FnMut() -> f64| {
            Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng()).collect()).expect("shape")
        };
        let mut normal = || -> f64 { rng.random_range(-0.5..0.5) };
        let token_embedding = emb(c.vocab_size, c.token_dim, &mut normal);
        let device_embedding = emb(c.num_devices, c.categorical_dim, &mut normal);
        let context_embedding = emb(c.num_context, c.categorical_dim, &mut normal);
        let skill_embedding = emb(c.num_skills, c.categorical_dim, &mut normal);
        let interpretation_embedding = emb(c.num_interpretation, c.categorical_dim, &mut normal);
        Ok(Self {
            lstm: BiLstmParams {
                forward: LstmParams::init(c.token_dim, c.lstm_hidden, rng),
                backward: LstmParams::init(c.token_dim, c.lstm_hidden, rng),
            },
            pool_context: init::uniform(&[2 * c.lstm_hidden, 1], 0.1, rng),
            fuse_query: init::xavier(c.query_width(), c.d, rng),
            fuse_hypothesis: init::xavier(c.hypothesis_width(), c.d, rng),
            fuse_bias: Tensor::zeros(&[c.d]),
            predict_weight: init::xavier(c.d, 1, rng),
            predict_bias: Tensor::zeros(&[1]),
            token_embedding,
            device_embedding,
            context_embedding,
            skill_embedding,
            interpretation_embedding,
            config,
        })
    }

    /// Every parameter with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        BACKBONE_TENSORS
            .iter()
            .map(|s| s.to_string())
            .zip(self.tensors())
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let [fi, fh, fb] = self.lstm.forward.tensors();
        let [bi, bh, bb] = self.lstm.backward.tensors();
        vec![
            &self.token_embedding,
            fi,
            fh,
            fb,
            bi,
            bh,
            bb,
            &self.pool_context,
            &self.device_embedding,
            &self.context_embedding,
            &self.skill_embedding,
            &self.interpretation_embedding,
            &self.fuse_query,
            &self.fuse_hypothesis,
            &self.fuse_bias,
            &self.predict_weight,
            &self.predict_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let [fi, fh, fb] = self.lstm.forward.tensors_mut();
        let [bi, bh, bb] = self.lstm.backward.tensors_mut();
        vec![
            &mut self.token_embedding,
            fi,
            fh,
            fb,
            bi,
            bh,
            bb,
            &mut self.pool_context,
            &mut self.device_embedding,
            &mut self.context_embedding,
            &mut self.skill_embedding,
            &mut self.interpretation_embedding,
            &mut self.fuse_query,
            &mut self.fuse_hypothesis,
            &mut self.fuse_bias,
            &mut self.predict_weight,
            &mut self.predict_bias,
        ]
    }

    /// Records every parameter on `g`; frozen parameters become constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundBackbone {
        let mut b = |t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
        let token_embedding = b(&self.token_embedding);
        let pool_context = b(&self.pool_context);
        let device_embedding = b(&self.device_embedding);
        let context_embedding = b(&self.context_embedding);
        let skill_embedding = b(&self.skill_embedding);
        let interpretation_embedding = b(&self.interpretation_embedding);
        let fuse_query = b(&self.fuse_query);
        let fuse_hypothesis = b(&self.fuse_hypothesis);
        let fuse_bias = b(&self.fuse_bias);
        let predict_weight = b(&self.predict_weight);
        let predict_bias = b(&self.predict_bias);
        BoundBackbone {
            forward: self.lstm.forward.bind(g, trainable),
            backward: self.lstm.backward.bind(g, trainable),
            token_embedding,
            pool_context,
            device_embedding,
            context_embedding,
            skill_embedding,
            interpretation_embedding,
            fuse_query,
            fuse_hypothesis,
            fuse_bias,
            predict_weight,
            predict_bias,
        }
    }

    pub fn collect_grads(&mut self, g: &Graph, b: &BoundBackbone) {
        self.lstm.forward.collect_grads(g, &b.forward);
        self.lstm.backward.collect_grads(g, &b.backward);
        for (t, v) in [
            (&mut self.token_embedding, b.token_embedding),
            (&mut self.pool_context, b.pool_context),
            (&mut self.device_embedding, b.device_embedding),
            (&mut self.context_embedding, b.context_embedding),
            (&mut self.skill_embedding, b.skill_embedding),
            (&mut self.interpretation_embedding, b.interpretation_embedding),
            (&mut self.fuse_query, b.fuse_query),
            (&mut self.fuse_hypothesis, b.fuse_hypothesis),
            (&mut self.fuse_bias, b.fuse_bias),
            (&mut self.predict_weight, b.predict_weight),
            (&mut self.predict_bias, b.predict_bias),
        ] {
            if let Some(gr) = g.grad(v) {
                t.accumulate_grad(gr);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Representation rows for a single sample (`n × d`).
    pub fn encode(&self, sample: &Sample) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let enc = encode_batch(&mut g, self, &b, &[sample])?;
        Ok(g.to_tensor(enc.x))
    }

    /// Routing scores in `(0, 1)` for a single sample.
    pub fn score(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let enc = encode_batch(&mut g, self, &b, &[sample])?;
        let s = predict_base(&mut g, &b, enc.x)?;
        Ok(g.value(s).to_vec())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBackbone {
    pub forward: BoundLstm,
    pub backward: BoundLstm,
    pub token_embedding: Var,
    pub pool_context: Var,
    pub device_embedding: Var,
    pub context_embedding: Var,
    pub skill_embedding: Var,
    pub interpretation_embedding: Var,
    pub fuse_query: Var,
    pub fuse_hypothesis: Var,
    pub fuse_bias: Var,
    pub predict_weight: Var,
    pub predict_bias: Var,
}

/// Row layout of a batch flattened to one row per hypothesis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HypothesisLayout {
    /// Sample index of each hypothesis row.
    pub row_sample: Vec<usize>,
    /// First row of each sample; one extra trailing entry holds the total.
    pub offsets: Vec<usize>,
}

impl HypothesisLayout {
    pub fn new(counts: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        let mut row_sample = Vec::new();
        for (b, n) in counts.into_iter().enumerate() {
            row_sample.extend(std::iter::repeat_n(b, n));
            offsets.push(offsets[b] + n);
        }
        Self { row_sample, offsets }
    }

    pub fn num_samples(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_rows(&self) -> usize {
        self.row_sample.len()
    }

    pub fn count(&self, b: usize) -> usize {
        self.offsets[b + 1] - self.offsets[b]
    }

    pub fn rows(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    /// Per-row weights `1 / (n_b · B)`: averages within a sample, then over
    /// samples.
    pub fn mean_weights(&self) -> Vec<f64> {
        let nb = self.num_samples() as f64;
        self.row_sample
            .iter()
            .map(|&b| 1.0 / (self.count(b) as f64 * nb))
            .collect()
    }

    /// One-hot targets marking each sample's ground-truth row.
    pub fn one_hot(&self, truth: &[usize]) -> Result<Vec<f64>> {
        let mut t = vec![0.0; self.num_rows()];
        for (b, &gi) in truth.iter().enumerate() {
            if gi >= self.count(b) {
                return Err(Error::Index {
                    index: gi,
                    len: self.count(b),
                });
            }
            t[self.offsets[b] + gi] = 1.0;
        }
        Ok(t)
    }
}

pub struct EncodedBatch {
    /// `H × d` representation rows.
    pub x: Var,
    pub layout: HypothesisLayout,
}

fn mean_pool_ids(g: &mut Graph, table: Var, lists: &[&[usize]], width: usize) -> Result<Var> {
    let mut ids = Vec::new();
    let mut seg = Vec::new();
    let mut w = Vec::new();
    for (r, l) in lists.iter().enumerate() {
        for &i in l.iter() {
            ids.push(Some(i));
            seg.push(r);
            w.push(1.0 / l.len() as f64);
        }
    }
    if ids.is_empty() {
        return g.input(&[lists.len(), width], vec![0.0; lists.len() * width]);
    }
    let rows = g.gather_rows(table, &ids)?;
    g.segment_sum(rows, &seg, lists.len(), Some(&w))
}

/// `x = M(X, H)` for a batch of samples.
pub fn encode_batch(g: &mut Graph, p: &BackboneParams, b: &BoundBackbone, samples: &[&Sample]) -> Result<EncodedBatch> {
    if samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let cfg = &p.config;
    for s in samples {
        cfg.check_sample(s)?;
    }
    let seqs: Vec<&[usize]> = samples.iter().map(|s| s.signals.utterance_tokens.as_slice()).collect();
    let (states, seg) = lstm::encode_token_batch(g, b.token_embedding, &seqs, &b.forward, &b.backward)?;
    let scores = g.matmul(states, b.pool_context)?;
    let attn = g.segment_softmax(scores, &seg)?;
    let weighted = g.mul_rows(states, attn)?;
    let pooled = g.segment_sum(weighted, &seg, samples.len(), None)?;

    let devices: Vec<Option<usize>> = samples.iter().map(|s| Some(s.signals.device_type)).collect();
    let device = g.gather_rows(b.device_embedding, &devices)?;
    let ctx_lists: Vec<&[usize]> = samples.iter().map(|s| s.signals.shared_context.as_slice()).collect();
    let context = mean_pool_ids(g, b.context_embedding, &ctx_lists, cfg.categorical_dim)?;
    let query = g.concat_cols(&[pooled, device, context])?;
    let query = g.matmul(query, b.fuse_query)?;

    let layout = HypothesisLayout::new(samples.iter().map(|s| s.hypotheses.len()));
    let hyps: Vec<&Hypothesis> = samples.iter().flat_map(|s| s.hypotheses.iter()).collect();
    let skills: Vec<Option<usize>> = hyps.iter().map(|h| Some(h.skill)).collect();
    let skill = g.gather_rows(b.skill_embedding, &skills)?;
    let feat_lists: Vec<&[usize]> = hyps.iter().map(|h| h.interpretation_features.as_slice()).collect();
    let feats = mean_pool_ids(g, b.interpretation_embedding, &feat_lists, cfg.categorical_dim)?;
    let hyp = g.concat_cols(&[skill, feats])?;
    let hyp = g.matmul(hyp, b.fuse_hypothesis)?;

    // concat(query, hyp)·W == query·W_q + hyp·W_h
    let rows: Vec<Option<usize>> = layout.row_sample.iter().map(|&s| Some(s)).collect();
    let query = g.gather_rows(query, &rows)?;
    let fused = g.add(query, hyp)?;
    let fused = g.add_bias(fused, b.fuse_bias)?;
    let x = g.tanh(fused);
    Ok(EncodedBatch { x, layout })
}

/// Row-wise `sigmoid(x·w + b)`; one score per hypothesis row.
pub fn predict_base(g: &mut Graph, b: &BoundBackbone, x: Var) -> Result<Var> {
    let logits = g.matmul(x, b.predict_weight)?;
    let logits = g.add_bias(logits, b.predict_bias)?;
    Ok(g.sigmoid(logits))
}

/// BCE against the one-hot ground truth, averaged per sample then over the
/// batch.
pub fn base_loss(g: &mut Graph, scores: Var, layout: &HypothesisLayout, truth: &[usize]) -> Result<Var> {
    let target = layout.one_hot(truth)?;
    g.bce_weighted(scores, &target, &layout.mean_weights())
}

/// Argmax with ties resolved to the lowest index.
pub fn select_hypothesis(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
