//! Experiment configuration and its flat `section.key = value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::datagen::TrafficConfig;
use crate::error::{Error, Result};
use crate::slice_aware::{AttentionConfig, AttentionMethod, FinalHead, NoiseScale, SliceOptions};
use crate::slicing::{BaseSlice, SliceConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "P")]
    P,
    #[serde(rename = "P_UP")]
    PUp,
    #[serde(rename = "S")]
    S,
    #[serde(rename = "S_UP")]
    SUp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::P, ModelKind::PUp, ModelKind::S, ModelKind::SUp];

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::P => "P",
            ModelKind::PUp => "P_UP",
            ModelKind::S => "S",
            ModelKind::SUp => "S_UP",
        }
    }

    pub fn is_slice_aware(self) -> bool {
        matches!(self, ModelKind::S | ModelKind::SUp)
    }

    pub fn is_upsampled(self) -> bool {
        matches!(self, ModelKind::PUp | ModelKind::SUp)
    }

    /// The backbone kind an S-kind model is built on.
    pub fn backbone_kind(self) -> ModelKind {
        if self.is_upsampled() {
            ModelKind::PUp
        } else {
            ModelKind::P
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" | "p" => Ok(ModelKind::P),
            "P_UP" | "p_up" => Ok(ModelKind::PUp),
            "S" | "s" => Ok(ModelKind::S),
            "S_UP" | "s_up" => Ok(ModelKind::SUp),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointPolicy {
    /// Keep the epoch with the lowest validation loss.
    #[default]
    BestValidation,
    FinalEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model_kind: ModelKind,
    pub seed: u64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub slices_path: Option<PathBuf>,
    pub backbone_checkpoint: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub d: usize,
    pub token_dim: usize,
    pub categorical_dim: usize,
    pub lstm_hidden: usize,
    pub attention: AttentionConfig,
    pub slice: SliceOptions,
    pub base_slice: BaseSlice,
    pub upsample_multiplier: f64,
    /// Fraction of the training file kept for training; the rest validates.
    pub train_fraction: f64,
    pub checkpoint_policy: CheckpointPolicy,
    pub traffic: TrafficConfig,
    /// Size of the generated test file.
    pub test_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        Self {
            model_kind: ModelKind::P,
            seed: 7,
            train_path: None,
            test_path: None,
            slices_path: None,
            backbone_checkpoint: None,
            epochs: 10,
            batch_size: 256,
            lr: 0.001,
            d: bb.d,
            token_dim: bb.token_dim,
            categorical_dim: bb.categorical_dim,
            lstm_hidden: bb.lstm_hidden,
            attention: AttentionConfig::default(),
            slice: SliceOptions::default(),
            base_slice: BaseSlice::Complement,
            upsample_multiplier: 3.0,
            train_fraction: 0.9,
            checkpoint_policy: CheckpointPolicy::BestValidation,
            traffic: TrafficConfig::default(),
            test_samples: 10_000,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_pair(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected \"min,max\", got {v:?}")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn path_or_none(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            token_dim: self.token_dim,
            categorical_dim: self.categorical_dim,
            lstm_hidden: self.lstm_hidden,
            ..self.traffic.backbone_config(self.d)
        }
    }

    pub fn slice_config(&self) -> Result<SliceConfig> {
        let cfg = match &self.slices_path {
            Some(p) => SliceConfig::load(p)?,
            None => self.traffic.slice_config()?,
        };
        Ok(cfg.with_base(self.base_slice))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train.fraction {} outside (0, 1)", self.train_fraction)));
        }
        if !(self.upsample_multiplier >= 1.0 && self.upsample_multiplier.is_finite()) {
            return Err(Error::Config("upsample.multiplier must be ≥ 1".into()));
        }
        if self.slice.augment_sigma < 0.0 {
            return Err(Error::Config("augment.sigma must be ≥ 0".into()));
        }
        AttentionConfig::new(self.attention.method, self.attention.tau)?;
        self.backbone_config().validate()?;
        self.traffic.validate()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.traffic;
        let s = &mut self.slice;
        match key {
            "experiment.model_kind" => self.model_kind = v.parse()?,
            "experiment.seed" => self.seed = parse(key, v)?,
            "paths.train" => self.train_path = path_or_none(v),
            "paths.test" => self.test_path = path_or_none(v),
            "paths.slices" => self.slices_path = path_or_none(v),
            "paths.backbone_checkpoint" => self.backbone_checkpoint = path_or_none(v),
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.fraction" => self.train_fraction = parse(key, v)?,
            "train.checkpoint" => {
                self.checkpoint_policy = match v {
                    "best" => CheckpointPolicy::BestValidation,
                    "final" => CheckpointPolicy::FinalEpoch,
                    _ => return Err(Error::Config(format!("{key}: expected best or final, got {v:?}"))),
                }
            }
            "model.d" => self.d = parse(key, v)?,
            "model.token_dim" => self.token_dim = parse(key, v)?,
            "model.categorical_dim" => self.categorical_dim = parse(key, v)?,
            "model.lstm_hidden" => self.lstm_hidden = parse(key, v)?,
            "attention.method" => self.attention.method = v.parse::<AttentionMethod>()?,
            "attention.tau" => self.attention.tau = parse(key, v)?,
            "loss.base" => s.loss_weights.base = parse(key, v)?,
            "loss.indicator" => s.loss_weights.indicator = parse(key, v)?,
            "loss.expert" => s.loss_weights.expert = parse(key, v)?,
            "loss.final" => s.loss_weights.final_ = parse(key, v)?,
            "augment.sigma" => s.augment_sigma = parse(key, v)?,
            "augment.scale" => {
                s.noise_scale = match v {
                    "std" => NoiseScale::StdDev,
                    "variance" => NoiseScale::Variance,
                    _ => return Err(Error::Config(format!("{key}: expected std or variance, got {v:?}"))),
                }
            }
            "slice.final_head" => {
                s.final_head = match v {
                    "dedicated" => FinalHead::Dedicated,
                    "shared" => FinalHead::Shared,
                    _ => return Err(Error::Config(format!("{key}: expected dedicated or shared, got {v:?}"))),
                }
            }
            "slice.freeze_backbone" => s.freeze_backbone = parse_bool(key, v)?,
            "slice.warm_start" => s.warm_start = parse_bool(key, v)?,
            "slice.max_hypotheses" => s.max_hypotheses = parse(key, v)?,
            "slice.base" => {
                self.base_slice = match v {
                    "complement" => BaseSlice::Complement,
                    "all" => BaseSlice::AllCovering,
                    _ => return Err(Error::Config(format!("{key}: expected complement or all, got {v:?}"))),
                }
            }
            "upsample.multiplier" => self.upsample_multiplier = parse(key, v)?,
            "data.num_intents" => t.num_intents = parse(key, v)?,
            "data.zipf_exponent" => t.zipf_exponent = parse(key, v)?,
            "data.tail_intents" => {
                t.tail_intents = v
                    .split(',')
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(str::to_string)
                    .collect()
            }
            "data.vocab_size" => t.vocab_size = parse(key, v)?,
            "data.utterance_length" => t.utterance_length_range = parse_pair(key, v)?,
            "data.hypotheses" => t.hypotheses_range = parse_pair(key, v)?,
            "data.num_skills" => t.num_skills = parse(key, v)?,
            "data.label_noise_rate" => t.label_noise_rate = parse(key, v)?,
            "data.seed" => t.seed = parse(key, v)?,
            "data.train_samples" => t.num_samples = parse(key, v)?,
            "data.test_samples" => self.test_samples = parse(key, v)?,
            "data.num_domains" => t.num_domains = parse(key, v)?,
            "data.num_devices" => t.num_devices = parse(key, v)?,
            "data.num_context" => t.num_context = parse(key, v)?,
            "data.keywords_per_intent" => t.keywords_per_intent = parse(key, v)?,
            "data.intent_token_rate" => t.intent_token_rate = parse(key, v)?,
            "data.domain_token_rate" => t.domain_token_rate = parse(key, v)?,
            "data.intent_overlap" => t.intent_overlap = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let s = &self.slice;
        let t = &self.traffic;
        let lw = s.loss_weights;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("experiment.model_kind", self.model_kind.label().into());
        put("experiment.seed", self.seed.to_string());
        put("paths.train", show_path(&self.train_path));
        put("paths.test", show_path(&self.test_path));
        put("paths.slices", show_path(&self.slices_path));
        put("paths.backbone_checkpoint", show_path(&self.backbone_checkpoint));
        put("train.epochs", self.epochs.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.lr", self.lr.to_string());
        put("train.fraction", self.train_fraction.to_string());
        put(
            "train.checkpoint",
            match self.checkpoint_policy {
                CheckpointPolicy::BestValidation => "best",
                CheckpointPolicy::FinalEpoch => "final",
            }
            .into(),
        );
        put("model.d", self.d.to_string());
        put("model.token_dim", self.token_dim.to_string());
        put("model.categorical_dim", self.categorical_dim.to_string());
        put("model.lstm_hidden", self.lstm_hidden.to_string());
        put("attention.method", self.attention.method.label().into());
        put("attention.tau", self.attention.tau.to_string());
        put("loss.base", lw.base.to_string());
        put("loss.indicator", lw.indicator.to_string());
        put("loss.expert", lw.expert.to_string());
        put("loss.final", lw.final_.to_string());
        put("augment.sigma", s.augment_sigma.to_string());
        put(
            "augment.scale",
            match s.noise_scale {
                NoiseScale::StdDev => "std",
                NoiseScale::Variance => "variance",
            }
            .into(),
        );
        put(
            "slice.final_head",
            match s.final_head {
                FinalHead::Dedicated => "dedicated",
                FinalHead::Shared => "shared",
            }
            .into(),
        );
        put("slice.freeze_backbone", s.freeze_backbone.to_string());
        put("slice.warm_start", s.warm_start.to_string());
        put("slice.max_hypotheses", s.max_hypotheses.to_string());
        put(
            "slice.base",
            match self.base_slice {
                BaseSlice::Complement => "complement",
                BaseSlice::AllCovering => "all",
            }
            .into(),
        );
        put("upsample.multiplier", self.upsample_multiplier.to_string());
        put("data.num_intents", t.num_intents.to_string());
        put("data.zipf_exponent", t.zipf_exponent.to_string());
        put("data.tail_intents", t.tail_intents.join(","));
        put("data.vocab_size", t.vocab_size.to_string());
        put(
            "data.utterance_length",
            format!("{},{}", t.utterance_length_range.0, t.utterance_length_range.1),
        );
        put("data.hypotheses", format!("{},{}", t.hypotheses_range.0, t.hypotheses_range.1));
        put("data.num_skills", t.num_skills.to_string());
        put("data.label_noise_rate", t.label_noise_rate.to_string());
        put("data.seed", t.seed.to_string());
        put("data.train_samples", t.num_samples.to_string());
        put("data.test_samples", self.test_samples.to_string());
        put("data.num_domains", t.num_domains.to_string());
        put("data.num_devices", t.num_devices.to_string());
        put("data.num_context", t.num_context.to_string());
        put("data.keywords_per_intent", t.keywords_per_intent.to_string());
        put("data.intent_token_rate", t.intent_token_rate.to_string());
        put("data.domain_token_rate", t.domain_token_rate.to_string());
        put("data.intent_overlap", t.intent_overlap.to_string());
        out
    }
}
