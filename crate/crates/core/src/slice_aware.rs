//! Slice-aware extension of the backbone.
//!
//! For every slice `i` (base included) the model learns a membership
//! indicator `u_i = sigmoid(mean_rows(x)·w_i + b_i)` and a linear expert
//! `r_i = x·W_i + c_i` applied to every hypothesis row. A shared head scores
//! each expert's rows (`Q`), attention over slices combines the experts into
//! `s = Σ a_i r_i`, and a final head scores the rows of `s`.
//!
//! Two forward paths exist. The per-sample functions ([`expert_forward`],
//! [`slice_representation`], ...) materialize every `r_i`. [`forward_batch`]
//! is the training path: because experts and heads are linear it scores
//! `x·(W_i·w)` instead of `(x·W_i)·w`, which costs `O(k·d²)` per batch rather
//! than per hypothesis row. Tests check that both paths agree.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneParams, BoundBackbone, HypothesisLayout};
use crate::error::{Error, Result};
use crate::numerics::{init, Graph, Tensor, Var};
use crate::slicing::SliceLabelVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMethod {
    /// `softmax(P / τ)`
    IndicatorOnly,
    /// `softmax((P + |φ(Q)|) / τ)`
    IndicatorPlusExpert,
}

impl AttentionMethod {
    pub fn label(self) -> &'static str {
        match self {
            AttentionMethod::IndicatorOnly => "indicator",
            AttentionMethod::IndicatorPlusExpert => "indicator+expert",
        }
    }
}

impl std::str::FromStr for AttentionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indicator" | "indicator_only" | "INDICATOR_ONLY" => Ok(Self::IndicatorOnly),
            "indicator+expert" | "indicator_plus_expert" | "INDICATOR_PLUS_EXPERT" => {
                Ok(Self::IndicatorPlusExpert)
            }
            other => Err(Error::Config(format!("unknown attention method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub method: AttentionMethod,
    pub tau: f64,
}

impl AttentionConfig {
    pub fn new(method: AttentionMethod, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Parameter(format!("attention temperature must be > 0, got {tau}")));
        }
        Ok(Self { method, tau })
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            method: AttentionMethod::IndicatorOnly,
            tau: 1.0,
        }
    }
}

/// Multipliers of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub base: f64,
    pub indicator: f64,
    pub expert: f64,
    pub final_: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            base: 1.0,
            indicator: 1.0,
            expert: 1.0,
            final_: 1.0,
        }
    }
}

impl LossWeights {
    pub fn only_indicator() -> Self {
        Self {
            base: 0.0,
            indicator: 1.0,
            expert: 0.0,
            final_: 0.0,
        }
    }

    pub fn only_expert() -> Self {
        Self {
            base: 0.0,
            indicator: 0.0,
            expert: 1.0,
            final_: 0.0,
        }
    }
}

/// Reading of the augmentation scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseScale {
    #[default]
    StdDev,
    Variance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalHead {
    #[default]
    Dedicated,
    /// Score `s` with the shared expert head.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceOptions {
    pub loss_weights: LossWeights,
    pub augment_sigma: f64,
    pub noise_scale: NoiseScale,
    pub final_head: FinalHead,
    pub freeze_backbone: bool,
    /// Width of the `φ` transform: the longest hypothesis list supported.
    pub max_hypotheses: usize,
    /// Start experts at identity and both heads at `π`, so the untrained
    /// extension reproduces the backbone's scores.
    pub warm_start: bool,
}

impl Default for SliceOptions {
    fn default() -> Self {
        Self {
            loss_weights: LossWeights::default(),
            augment_sigma: 0.005,
            noise_scale: NoiseScale::StdDev,
            final_head: FinalHead::Dedicated,
            freeze_backbone: true,
            max_hypotheses: 8,
            warm_start: true,
        }
    }
}

impl SliceOptions {
    /// Standard deviation of the tail augmentation noise.
    pub fn noise_std(&self) -> f64 {
        match self.noise_scale {
            NoiseScale::StdDev => self.augment_sigma,
            NoiseScale::Variance => self.augment_sigma.sqrt(),
        }
    }
}

/// Indicator, expert, shared-head, final-head and `φ` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceHeads {
    /// `d × k`, column `i` is `w^f_i`.
    pub indicator_weight: Tensor,
    pub indicator_bias: Tensor,
    /// `(k·d) × d`, rows `i·d..(i+1)·d` hold `W_i`.
    pub expert_weight: Tensor,
    /// `k × d`
    pub expert_bias: Tensor,
    pub shared_weight: Tensor,
    pub shared_bias: Tensor,
    pub final_weight: Tensor,
    pub final_bias: Tensor,
    /// `φ`: `max_hypotheses × 1` weight over the sorted expert scores.
    pub q_weight: Tensor,
    pub q_bias: Tensor,
}

pub const HEAD_TENSORS: [&str; 10] = [
    "slice.indicator_weight",
    "slice.indicator_bias",
    "slice.expert_weight",
    "slice.expert_bias",
    "slice.shared_weight",
    "slice.shared_bias",
    "slice.final_weight",
    "slice.final_bias",
    "slice.q_weight",
    "slice.q_bias",
];

impl SliceHeads {
    pub fn zeros(k: usize, d: usize, max_hypotheses: usize) -> Self {
        Self {
            indicator_weight: Tensor::zeros(&[d, k]),
            indicator_bias: Tensor::zeros(&[k]),
            expert_weight: Tensor::zeros(&[k * d, d]),
            expert_bias: Tensor::zeros(&[k, d]),
            shared_weight: Tensor::zeros(&[d, 1]),
            shared_bias: Tensor::zeros(&[1]),
            final_weight: Tensor::zeros(&[d, 1]),
            final_bias: Tensor::zeros(&[1]),
            q_weight: Tensor::zeros(&[max_hypotheses, 1]),
            q_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn init(k: usize, d: usize, max_hypotheses: usize, rng: &mut impl Rng) -> Self {
        let mut h = Self::zeros(k, d, max_hypotheses);
        h.indicator_weight = init::xavier(d, k, rng);
        h.expert_weight = init::uniform(&[k * d, d], (3.0 / d as f64).sqrt(), rng);
        h.shared_weight = init::xavier(d, 1, rng);
        h.final_weight = init::xavier(d, 1, rng);
        h.q_weight = init::xavier(max_hypotheses, 1, rng);
        h
    }

    /// Identity experts; shared and final heads copied from `π`; `φ` reads
    /// the top expert score.
    pub fn warm_start(&mut self, backbone: &BackboneParams) {
        let (k, d) = (self.k(), self.d());
        let w = self.expert_weight.values_mut();
        w.fill(0.0);
        for i in 0..k {
            for j in 0..d {
                w[(i * d + j) * d + j] = 1.0;
            }
        }
        self.expert_bias.values_mut().fill(0.0);
        for head in [&mut self.shared_weight, &mut self.final_weight] {
            head.values_mut().copy_from_slice(backbone.predict_weight.values());
        }
        for bias in [&mut self.shared_bias, &mut self.final_bias] {
            bias.values_mut().copy_from_slice(backbone.predict_bias.values());
        }
        self.q_weight.values_mut().fill(0.0);
        self.q_weight.values_mut()[0] = 1.0;
        self.q_bias.values_mut().fill(0.0);
    }

    pub fn k(&self) -> usize {
        self.indicator_weight.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.indicator_weight.shape()[0]
    }

    pub fn max_hypotheses(&self) -> usize {
        self.q_weight.shape()[0]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.indicator_weight,
            &self.indicator_bias,
            &self.expert_weight,
            &self.expert_bias,
            &self.shared_weight,
            &self.shared_bias,
            &self.final_weight,
            &self.final_bias,
            &self.q_weight,
            &self.q_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.indicator_weight,
            &mut self.indicator_bias,
            &mut self.expert_weight,
            &mut self.expert_bias,
            &mut self.shared_weight,
            &mut self.shared_bias,
            &mut self.final_weight,
            &mut self.final_bias,
            &mut self.q_weight,
            &mut self.q_bias,
        ]
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        HEAD_TENSORS.iter().map(|s| s.to_string()).zip(self.tensors()).collect()
    }

    /// Records the heads on `g`; untrainable heads become constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundHeads {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect();
        BoundHeads {
            indicator_weight: vars[0],
            indicator_bias: vars[1],
            expert_weight: vars[2],
            expert_bias: vars[3],
            shared_weight: vars[4],
            shared_bias: vars[5],
            final_weight: vars[6],
            final_bias: vars[7],
            q_weight: vars[8],
            q_bias: vars[9],
            k: self.k(),
            d: self.d(),
            max_hypotheses: self.max_hypotheses(),
        }
    }

    pub fn collect_grads(&mut self, g: &Graph, b: &BoundHeads) {
        for (t, v) in self.tensors_mut().into_iter().zip(b.vars()) {
            if let Some(gr) = g.grad(v) {
                t.accumulate_grad(gr);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHeads {
    pub indicator_weight: Var,
    pub indicator_bias: Var,
    pub expert_weight: Var,
    pub expert_bias: Var,
    pub shared_weight: Var,
    pub shared_bias: Var,
    pub final_weight: Var,
    pub final_bias: Var,
    pub q_weight: Var,
    pub q_bias: Var,
    pub k: usize,
    pub d: usize,
    pub max_hypotheses: usize,
}

impl BoundHeads {
    pub fn vars(&self) -> [Var; 10] {
        [
            self.indicator_weight,
            self.indicator_bias,
            self.expert_weight,
            self.expert_bias,
            self.shared_weight,
            self.shared_bias,
            self.final_weight,
            self.final_bias,
            self.q_weight,
            self.q_bias,
        ]
    }
}

/// Backbone plus slice heads and their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceAwareModel {
    pub backbone: BackboneParams,
    pub heads: SliceHeads,
    pub attention: AttentionConfig,
    pub options: SliceOptions,
}

impl SliceAwareModel {
    pub fn new(
        backbone: BackboneParams,
        k: usize,
        attention: AttentionConfig,
        options: SliceOptions,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("slice count must be at least 1".into()));
        }
        if options.max_hypotheses == 0 {
            return Err(Error::Config("max_hypotheses must be positive".into()));
        }
        if options.augment_sigma < 0.0 {
            return Err(Error::Parameter("augmentation sigma must be ≥ 0".into()));
        }
        let mut heads = SliceHeads::init(k, backbone.config.d, options.max_hypotheses, rng);
        if options.warm_start {
            heads.warm_start(&backbone);
        }
        Ok(Self {
            backbone,
            heads,
            attention,
            options,
        })
    }

    pub fn k(&self) -> usize {
        self.heads.k()
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.backbone.named();
        v.extend(self.heads.named());
        v
    }

    /// Trainable tensors: the heads, plus the backbone unless frozen.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.heads.tensors_mut();
        if !self.options.freeze_backbone {
            v.extend(self.backbone.tensors_mut());
        }
        v
    }
}

fn check_rows(g: &Graph, x: Var, d: usize) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != d {
        return Err(Error::dim("slice input", s, &[0, d]));
    }
    Ok(s[0])
}

/// Membership likelihoods `P` (`1 × k`) from the mean of `x`'s rows.
pub fn indicator_forward(g: &mut Graph, x: Var, heads: &BoundHeads) -> Result<Var> {
    let n = check_rows(g, x, heads.d)?;
    let w = vec![1.0 / n as f64; n];
    let pooled = g.segment_sum(x, &vec![0; n], 1, Some(&w))?;
    let logits = g.matmul(pooled, heads.indicator_weight)?;
    let logits = g.add_bias(logits, heads.indicator_bias)?;
    Ok(g.sigmoid(logits))
}

/// `Σ_i bce(P_i, γ_i)`.
pub fn indicator_loss(g: &mut Graph, p: Var, gamma: &SliceLabelVector) -> Result<Var> {
    if g.value(p).len() != gamma.len() {
        return Err(Error::dim("indicator_loss", g.shape(p), &[gamma.len()]));
    }
    g.bce_weighted(p, &gamma.to_f64(), &vec![1.0; gamma.len()])
}

/// One `n × d` representation per slice: `r_i = x·W_i + c_i`.
pub fn expert_forward(g: &mut Graph, x: Var, heads: &BoundHeads) -> Result<Vec<Var>> {
    let d = heads.d;
    check_rows(g, x, d)?;
    (0..heads.k)
        .map(|i| {
            let rows: Vec<Option<usize>> = (i * d..(i + 1) * d).map(Some).collect();
            let w = g.gather_rows(heads.expert_weight, &rows)?;
            let b = g.gather_rows(heads.expert_bias, &[Some(i)])?;
            let r = g.matmul(x, w)?;
            g.add_bias(r, b)
        })
        .collect()
}

/// `Q` (`k × n`): row `i` is `sigmoid(r_i·w_s + b_s)`.
pub fn expert_scores(g: &mut Graph, reps: &[Var], heads: &BoundHeads) -> Result<Var> {
    if reps.len() != heads.k {
        return Err(Error::dim("expert_scores", &[reps.len()], &[heads.k]));
    }
    let cols = reps
        .iter()
        .map(|&r| {
            let z = g.matmul(r, heads.shared_weight)?;
            let z = g.add_bias(z, heads.shared_bias)?;
            Ok(g.sigmoid(z))
        })
        .collect::<Result<Vec<_>>>()?;
    let q = g.concat_cols(&cols)?;
    g.transpose(q)
}

/// `Σ_i γ_i · bce(Q_i, onehot(truth))`, each BCE averaged over hypotheses.
pub fn expert_loss(g: &mut Graph, q: Var, gamma: &SliceLabelVector, truth: usize) -> Result<Var> {
    let s = g.shape(q).to_vec();
    if s.len() != 2 || s[0] != gamma.len() {
        return Err(Error::dim("expert_loss", &s, &[gamma.len(), 0]));
    }
    let (k, n) = (s[0], s[1]);
    if truth >= n {
        return Err(Error::Index { index: truth, len: n });
    }
    let mut target = vec![0.0; k * n];
    let mut weights = vec![0.0; k * n];
    for i in 0..k {
        target[i * n + truth] = 1.0;
        if gamma.get(i) {
            weights[i * n..(i + 1) * n].fill(1.0 / n as f64);
        }
    }
    g.bce_weighted(q, &target, &weights)
}

/// Sorts each length-`n` row of `q_rows` (`R × n`) in descending order,
/// zero-pads to `width`, and applies `φ`. Returns an `R × 1` column.
fn q_transform(g: &mut Graph, q: Var, rows: &[Vec<usize>], width: usize, heads: &BoundHeads) -> Result<Var> {
    let vals = g.value(q);
    let mut idx = vec![None; rows.len() * width];
    for (r, elems) in rows.iter().enumerate() {
        if elems.len() > width {
            return Err(Error::Input(format!(
                "{} hypotheses exceed the φ width {width}",
                elems.len()
            )));
        }
        let mut sorted = elems.clone();
        sorted.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        for (j, e) in sorted.into_iter().enumerate() {
            idx[r * width + j] = Some(e);
        }
    }
    let padded = g.gather(q, &idx, &[rows.len(), width])?;
    let z = g.matmul(padded, heads.q_weight)?;
    g.add_bias(z, heads.q_bias)
}

/// Attention over slices (`1 × k`) for a single sample.
pub fn attention_weights(g: &mut Graph, p: Var, q: Var, cfg: &AttentionConfig, heads: &BoundHeads) -> Result<Var> {
    let k = g.value(p).len();
    match cfg.method {
        AttentionMethod::IndicatorOnly => g.softmax_rows(p, cfg.tau),
        AttentionMethod::IndicatorPlusExpert => {
            let s = g.shape(q).to_vec();
            if s.len() != 2 || s[0] != k {
                return Err(Error::dim("attention_weights", &s, &[k, 0]));
            }
            let n = s[1];
            let rows: Vec<Vec<usize>> = (0..k).map(|i| (i * n..(i + 1) * n).collect()).collect();
            let phi = q_transform(g, q, &rows, heads.max_hypotheses, heads)?;
            let phi = g.reshape(phi, g.shape(p).to_vec().as_slice())?;
            let phi = g.abs(phi);
            let logits = g.add(p, phi)?;
            g.softmax_rows(logits, cfg.tau)
        }
    }
}

/// `s = Σ_i a_i r_i`.
pub fn slice_representation(g: &mut Graph, reps: &[Var], a: Var) -> Result<Var> {
    if reps.len() != g.value(a).len() || reps.is_empty() {
        return Err(Error::dim("slice_representation", &[reps.len()], g.shape(a)));
    }
    let n = g.shape(reps[0])[0];
    let mut acc: Option<Var> = None;
    for (i, &r) in reps.iter().enumerate() {
        let ai = g.gather(a, &vec![Some(i); n], &[n])?;
        let term = g.mul_rows(r, ai)?;
        acc = Some(match acc {
            None => term,
            Some(s) => g.add(s, term)?,
        });
    }
    Ok(acc.expect("k ≥ 1"))
}

fn final_head(heads: &BoundHeads, which: FinalHead) -> (Var, Var) {
    match which {
        FinalHead::Dedicated => (heads.final_weight, heads.final_bias),
        FinalHead::Shared => (heads.shared_weight, heads.shared_bias),
    }
}

/// Final routing scores `sigmoid(s·w + b)` (`n × 1`).
pub fn predict_final(g: &mut Graph, s: Var, heads: &BoundHeads, which: FinalHead) -> Result<Var> {
    let (w, b) = final_head(heads, which);
    let z = g.matmul(s, w)?;
    let z = g.add_bias(z, b)?;
    Ok(g.sigmoid(z))
}

/// Adds `N(0, sigma²)` noise to tail-slice representations.
pub fn augment_tail(x: &Tensor, gamma: &SliceLabelVector, sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Parameter(format!("noise sigma must be ≥ 0, got {sigma}")));
    }
    let mut out = x.clone();
    if sigma == 0.0 || !gamma.is_tail() {
        return Ok(out);
    }
    add_noise(out.values_mut(), sigma, rng);
    Ok(out)
}

pub(crate) fn add_noise(values: &mut [f64], sigma: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in values {
        *v += normal.sample(rng);
    }
}

/// Every term of the training objective for one sample.
pub struct SampleLosses {
    pub base: Var,
    pub indicator: Var,
    pub expert: Var,
    pub final_: Var,
    pub total: Var,
}

fn weighted_total(g: &mut Graph, terms: [(f64, Var); 4]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (w, t) in terms {
        if w == 0.0 {
            continue;
        }
        let t = if w == 1.0 { t } else { g.scale(t, w) };
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.input(&[], vec![0.0])?,
    })
}

/// Per-sample objective through the materialized expert path. `x` is the
/// (possibly augmented) backbone representation of `sample`.
pub fn total_loss(
    g: &mut Graph,
    model: &SliceAwareModel,
    bb: &BoundBackbone,
    heads: &BoundHeads,
    x: Var,
    gamma: &SliceLabelVector,
    truth: usize,
) -> Result<SampleLosses> {
    let n = check_rows(g, x, heads.d)?;
    let layout = HypothesisLayout::new([n]);
    let base_scores = backbone::predict_base(g, bb, x)?;
    let base = backbone::base_loss(g, base_scores, &layout, &[truth])?;
    let p = indicator_forward(g, x, heads)?;
    let indicator = indicator_loss(g, p, gamma)?;
    let reps = expert_forward(g, x, heads)?;
    let q = expert_scores(g, &reps, heads)?;
    let expert = expert_loss(g, q, gamma, truth)?;
    let a = attention_weights(g, p, q, &model.attention, heads)?;
    let s = slice_representation(g, &reps, a)?;
    let fin = predict_final(g, s, heads, model.options.final_head)?;
    let final_ = backbone::base_loss(g, fin, &layout, &[truth])?;
    let lw = model.options.loss_weights;
    let total = weighted_total(
        g,
        [
            (lw.base, base),
            (lw.indicator, indicator),
            (lw.expert, expert),
            (lw.final_, final_),
        ],
    )?;
    Ok(SampleLosses {
        base,
        indicator,
        expert,
        final_,
        total,
    })
}

/// Outputs of the batched forward pass.
pub struct BatchForward {
    /// `B × k` membership likelihoods.
    pub membership: Var,
    /// `H × k` expert scores (row = hypothesis, column = slice).
    pub expert_scores: Var,
    /// `B × k` attention weights.
    pub attention: Var,
    /// `H × 1` final routing scores.
    pub final_scores: Var,
    /// `H × 1` backbone routing scores.
    pub base_scores: Var,
}

/// `W_stack · w` reshaped to `d × k` plus `C · w` (length `k`).
fn fold_head(g: &mut Graph, heads: &BoundHeads, w: Var) -> Result<(Var, Var)> {
    let folded = g.matmul(heads.expert_weight, w)?;
    let folded = g.reshape(folded, &[heads.k, heads.d])?;
    let folded = g.transpose(folded)?;
    let bias = g.matmul(heads.expert_bias, w)?;
    Ok((folded, bias))
}

/// Batched forward over `x` (`H × d`, rows grouped per `layout`).
pub fn forward_batch(
    g: &mut Graph,
    model: &SliceAwareModel,
    bb: &BoundBackbone,
    heads: &BoundHeads,
    x: Var,
    layout: &HypothesisLayout,
) -> Result<BatchForward> {
    let rows = check_rows(g, x, heads.d)?;
    if rows != layout.num_rows() {
        return Err(Error::dim("forward_batch", &[rows], &[layout.num_rows()]));
    }
    let (nb, k) = (layout.num_samples(), heads.k);
    let base_scores = backbone::predict_base(g, bb, x)?;

    let mean_w: Vec<f64> = layout
        .row_sample
        .iter()
        .map(|&b| 1.0 / layout.count(b) as f64)
        .collect();
    let pooled = g.segment_sum(x, &layout.row_sample, nb, Some(&mean_w))?;
    let p = g.matmul(pooled, heads.indicator_weight)?;
    let p = g.add_bias(p, heads.indicator_bias)?;
    let membership = g.sigmoid(p);

    let spread = vec![Some(0); k];
    let (v, cv) = fold_head(g, heads, heads.shared_weight)?;
    let qz = g.matmul(x, v)?;
    let qz = g.add_bias(qz, cv)?;
    let sb = g.gather(heads.shared_bias, &spread, &[k])?;
    let qz = g.add_bias(qz, sb)?;
    let expert_scores = g.sigmoid(qz);

    let logits = match model.attention.method {
        AttentionMethod::IndicatorOnly => membership,
        AttentionMethod::IndicatorPlusExpert => {
            let groups: Vec<Vec<usize>> = (0..nb)
                .flat_map(|b| {
                    let r = layout.rows(b);
                    (0..k).map(move |i| r.clone().map(|h| h * k + i).collect())
                })
                .collect();
            let phi = q_transform(g, expert_scores, &groups, heads.max_hypotheses, heads)?;
            let phi = g.reshape(phi, &[nb, k])?;
            let phi = g.abs(phi);
            g.add(membership, phi)?
        }
    };
    let attention = g.softmax_rows(logits, model.attention.tau)?;

    let (fw, fb) = final_head(heads, model.options.final_head);
    let (u, cu) = fold_head(g, heads, fw)?;
    let e = g.matmul(x, u)?;
    let e = g.add_bias(e, cu)?;
    let per_row: Vec<Option<usize>> = layout.row_sample.iter().map(|&b| Some(b)).collect();
    let a_rows = g.gather_rows(attention, &per_row)?;
    let mixed = g.mul(a_rows, e)?;
    let z = g.row_sum(mixed);
    let z = g.add_bias(z, fb)?;
    let final_scores = g.sigmoid(z);
    Ok(BatchForward {
        membership,
        expert_scores,
        attention,
        final_scores,
        base_scores,
    })
}

pub struct BatchLosses {
    pub base: Var,
    pub indicator: Var,
    pub expert: Var,
    pub final_: Var,
    pub total: Var,
}

/// Batch objective: each term averaged over samples.
pub fn batch_loss(
    g: &mut Graph,
    model: &SliceAwareModel,
    fwd: &BatchForward,
    layout: &HypothesisLayout,
    gammas: &[&SliceLabelVector],
    truth: &[usize],
) -> Result<BatchLosses> {
    let (nb, k) = (layout.num_samples(), model.k());
    if gammas.len() != nb || truth.len() != nb {
        return Err(Error::dim("batch_loss", &[nb], &[gammas.len(), truth.len()]));
    }
    let one_hot = layout.one_hot(truth)?;
    let mean_w = layout.mean_weights();
    let base = g.bce_weighted(fwd.base_scores, &one_hot, &mean_w)?;

    let mut gamma_flat = Vec::with_capacity(nb * k);
    for gm in gammas {
        if gm.len() != k {
            return Err(Error::dim("batch_loss", &[gm.len()], &[k]));
        }
        gamma_flat.extend(gm.to_f64());
    }
    let indicator = g.bce_weighted(fwd.membership, &gamma_flat, &vec![1.0 / nb as f64; nb * k])?;

    let h = layout.num_rows();
    let mut target = vec![0.0; h * k];
    let mut weights = vec![0.0; h * k];
    for r in 0..h {
        let b = layout.row_sample[r];
        for i in 0..k {
            target[r * k + i] = one_hot[r];
            weights[r * k + i] = gamma_flat[b * k + i] * mean_w[r];
        }
    }
    let expert = g.bce_weighted(fwd.expert_scores, &target, &weights)?;
    let final_ = g.bce_weighted(fwd.final_scores, &one_hot, &mean_w)?;
    let lw = model.options.loss_weights;
    let total = weighted_total(
        g,
        [
            (lw.base, base),
            (lw.indicator, indicator),
            (lw.expert, expert),
            (lw.final_, final_),
        ],
    )?;
    Ok(BatchLosses {
        base,
        indicator,
        expert,
        final_,
        total,
    })
}
