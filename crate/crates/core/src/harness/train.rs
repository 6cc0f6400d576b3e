//! Deterministic mini-batch training for both model families.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneParams, HypothesisLayout, Sample};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, Graph, Tensor};
use crate::slice_aware::{self, add_noise, SliceAwareModel};
use crate::slicing::{assign_slices, SliceConfig, SliceLabelVector};

use super::config::{CheckpointPolicy, ExperimentConfig};

/// Batch size used for loss evaluation and feature caching.
pub const EVAL_BATCH: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; `None` when no epoch ran.
    pub selected_epoch: Option<usize>,
    pub steps: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
}

/// Independent ChaCha stream per purpose so that, e.g., the batch order does
/// not depend on how many draws initialization consumed.
pub(crate) fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

const INIT: u64 = 1;
const ORDER: u64 = 2;
const NOISE: u64 = 3;

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("loss became {loss} at epoch {epoch}, step {step}")))
    }
}

/// Tracks the per-epoch records and the parameters to keep.
struct Selector<M> {
    policy: CheckpointPolicy,
    best: Option<(f64, usize, M)>,
    epochs: Vec<EpochRecord>,
}

impl<M: Clone> Selector<M> {
    fn new(policy: CheckpointPolicy) -> Self {
        Self {
            policy,
            best: None,
            epochs: Vec::new(),
        }
    }

    fn record(&mut self, rec: EpochRecord, model: &M) {
        let keep = match (&self.best, self.policy) {
            (None, _) | (_, CheckpointPolicy::FinalEpoch) => true,
            (Some((best, _, _)), CheckpointPolicy::BestValidation) => rec.validation_loss < *best,
        };
        if keep {
            self.best = Some((rec.validation_loss, rec.epoch, model.clone()));
        }
        self.epochs.push(rec);
    }

    fn finish(self, last: M, steps: usize, train: usize, val: usize) -> (M, TrainReport) {
        let (model, selected) = match self.best {
            Some((_, e, m)) => (m, Some(e)),
            None => (last, None),
        };
        (
            model,
            TrainReport {
                epochs: self.epochs,
                selected_epoch: selected,
                steps,
                train_samples: train,
                validation_samples: val,
            },
        )
    }
}

fn truths(samples: &[&Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.ground_truth_index).collect()
}

/// Mean base loss of `params` over `samples`.
pub fn backbone_loss(params: &BackboneParams, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let enc = backbone::encode_batch(&mut g, params, &b, &refs)?;
        let scores = backbone::predict_base(&mut g, &b, enc.x)?;
        let loss = backbone::base_loss(&mut g, scores, &enc.layout, &truths(&refs))?;
        total += g.scalar(loss) * chunk.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains the backbone on the base loss alone.
pub fn train_backbone(cfg: &ExperimentConfig, train: &[Sample], val: &[Sample]) -> Result<(BackboneParams, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let bcfg = cfg.backbone_config();
    for s in train.iter().chain(val) {
        bcfg.check_sample(s)?;
    }
    let mut params = BackboneParams::init(bcfg, &mut stream(cfg.seed, INIT))?;
    let mut order_rng = stream(cfg.seed, ORDER);
    let mut adam = AdamState::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut sel = Selector::new(cfg.checkpoint_policy);
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let b = params.bind(&mut g, true);
            let enc = backbone::encode_batch(&mut g, &params, &b, &batch)?;
            let scores = backbone::predict_base(&mut g, &b, enc.x)?;
            let loss = backbone::base_loss(&mut g, scores, &enc.layout, &truths(&batch))?;
            let value = g.scalar(loss);
            check_finite(value, epoch, steps)?;
            g.backward(loss)?;
            params.collect_grads(&g, &b);
            adam_step(&mut params.tensors_mut(), &mut adam)?;
            params.zero_grad();
            sum += value * batch.len() as f64;
            steps += 1;
        }
        let validation_loss = backbone_loss(&params, val)?;
        check_finite(validation_loss, epoch, steps)?;
        sel.record(
            EpochRecord {
                epoch,
                train_loss: sum / train.len() as f64,
                validation_loss,
            },
            &params,
        );
    }
    Ok(sel.finish(params, steps, train.len(), val.len()))
}

/// Backbone representations of a dataset, computed once and stored as `f32`
/// rows for frozen-backbone training.
pub struct FeatureCache {
    d: usize,
    offsets: Vec<usize>,
    rows: Vec<f32>,
}

impl FeatureCache {
    pub fn build(params: &BackboneParams, samples: &[Sample]) -> Result<Self> {
        let d = params.config.d;
        let mut offsets = vec![0];
        let mut rows = Vec::new();
        for chunk in samples.chunks(EVAL_BATCH) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let mut g = Graph::new();
            let b = params.bind(&mut g, false);
            let enc = backbone::encode_batch(&mut g, params, &b, &refs)?;
            rows.extend(g.value(enc.x).iter().map(|&v| v as f32));
            for s in chunk {
                offsets.push(offsets.last().unwrap() + s.num_hypotheses());
            }
        }
        Ok(Self { d, offsets, rows })
    }

    /// `H × d` rows of the selected samples; samples flagged in `noisy` get
    /// i.i.d. Gaussian noise of standard deviation `sigma`.
    fn assemble(&self, idx: &[usize], noisy: &[bool], sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let mut out = Vec::new();
        for (&i, &noise) in idx.iter().zip(noisy) {
            let start = out.len();
            let r = self.offsets[i] * self.d..self.offsets[i + 1] * self.d;
            out.extend(self.rows[r].iter().map(|&v| v as f64));
            if noise && sigma > 0.0 {
                add_noise(&mut out[start..], sigma, rng);
            }
        }
        let h = out.len() / self.d;
        Tensor::new(&[h, self.d], out).expect("cached rows")
    }
}

struct SliceBatch<'a> {
    samples: Vec<&'a Sample>,
    gammas: Vec<&'a SliceLabelVector>,
    truth: Vec<usize>,
    layout: HypothesisLayout,
}

impl<'a> SliceBatch<'a> {
    fn new(idx: &[usize], data: &'a [Sample], gammas: &'a [SliceLabelVector]) -> Self {
        let samples: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        Self {
            layout: HypothesisLayout::new(samples.iter().map(|s| s.num_hypotheses())),
            truth: truths(&samples),
            gammas: idx.iter().map(|&i| &gammas[i]).collect(),
            samples,
        }
    }
}

/// Mean total objective of `model` over `samples`, without augmentation.
pub fn slice_loss(model: &SliceAwareModel, samples: &[Sample], slices: &SliceConfig) -> Result<f64> {
    let gammas: Vec<SliceLabelVector> = samples.iter().map(|s| assign_slices(s, slices)).collect();
    let mut total = 0.0;
    let all: Vec<usize> = (0..samples.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let batch = SliceBatch::new(idx, samples, &gammas);
        let mut g = Graph::new();
        let bb = model.backbone.bind(&mut g, false);
        let heads = model.heads.bind(&mut g, false);
        let enc = backbone::encode_batch(&mut g, &model.backbone, &bb, &batch.samples)?;
        let fwd = slice_aware::forward_batch(&mut g, model, &bb, &heads, enc.x, &batch.layout)?;
        let l = slice_aware::batch_loss(&mut g, model, &fwd, &batch.layout, &batch.gammas, &batch.truth)?;
        total += g.scalar(l.total) * idx.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains the slice extension on top of `backbone`.
pub fn train_slice_aware(
    cfg: &ExperimentConfig,
    backbone: BackboneParams,
    slices: &SliceConfig,
    train: &[Sample],
    val: &[Sample],
) -> Result<(SliceAwareModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    for s in train.iter().chain(val) {
        backbone.config.check_sample(s)?;
        if s.num_hypotheses() > cfg.slice.max_hypotheses {
            return Err(Error::Input(format!(
                "sample {} has {} hypotheses, above slice.max_hypotheses = {}",
                s.id,
                s.num_hypotheses(),
                cfg.slice.max_hypotheses
            )));
        }
    }
    let mut model = SliceAwareModel::new(
        backbone,
        slices.k(),
        cfg.attention,
        cfg.slice.clone(),
        &mut stream(cfg.seed, INIT),
    )?;
    let frozen = model.options.freeze_backbone;
    let sigma = model.options.noise_std();
    let gammas: Vec<SliceLabelVector> = train.iter().map(|s| assign_slices(s, slices)).collect();
    let cache = if frozen {
        Some(FeatureCache::build(&model.backbone, train)?)
    } else {
        None
    };
    let mut order_rng = stream(cfg.seed, ORDER);
    let mut noise_rng = stream(cfg.seed, NOISE);
    let mut adam = AdamState::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut sel = Selector::new(cfg.checkpoint_policy);
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = SliceBatch::new(idx, train, &gammas);
            let noisy: Vec<bool> = batch.gammas.iter().map(|g| g.is_tail()).collect();
            let mut g = Graph::new();
            let bb = model.backbone.bind(&mut g, !frozen);
            let heads = model.heads.bind(&mut g, true);
            let x = match &cache {
                Some(c) => {
                    let t = c.assemble(idx, &noisy, sigma, &mut noise_rng);
                    g.leaf(t)
                }
                None => {
                    let enc = backbone::encode_batch(&mut g, &model.backbone, &bb, &batch.samples)?;
                    if sigma > 0.0 {
                        let d = model.backbone.config.d;
                        let mut noise = vec![0.0; batch.layout.num_rows() * d];
                        for (b, &on) in noisy.iter().enumerate() {
                            if on {
                                let r = batch.layout.rows(b);
                                add_noise(&mut noise[r.start * d..r.end * d], sigma, &mut noise_rng);
                            }
                        }
                        let n = g.input(&[batch.layout.num_rows(), d], noise)?;
                        g.add(enc.x, n)?
                    } else {
                        enc.x
                    }
                }
            };
            let fwd = slice_aware::forward_batch(&mut g, &model, &bb, &heads, x, &batch.layout)?;
            let l = slice_aware::batch_loss(&mut g, &model, &fwd, &batch.layout, &batch.gammas, &batch.truth)?;
            let value = g.scalar(l.total);
            check_finite(value, epoch, steps)?;
            g.backward(l.total)?;
            model.heads.collect_grads(&g, &heads);
            if !frozen {
                model.backbone.collect_grads(&g, &bb);
            }
            let mut params = model.trainable_mut();
            adam_step(&mut params, &mut adam)?;
            params.into_iter().for_each(Tensor::zero_grad);
            sum += value * idx.len() as f64;
            steps += 1;
        }
        let validation_loss = slice_loss(&model, val, slices)?;
        check_finite(validation_loss, epoch, steps)?;
        sel.record(
            EpochRecord {
                epoch,
                train_loss: sum / train.len() as f64,
                validation_loss,
            },
            &model,
        );
    }
    Ok(sel.finish(model, steps, train.len(), val.len()))
}
