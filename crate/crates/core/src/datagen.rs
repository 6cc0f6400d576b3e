//! Synthetic long-tail routing traffic.
//!
//! The generated world has `num_intents` intents ranked by Zipf frequency
//! (`intent_01` is the most frequent). Intents are grouped into domains that
//! share keyword tokens and a pool of skills; every intent owns a few
//! keywords of its own and a device-dependent rule choosing which of its
//! domain's skills serves it. The rule is what the routing label replicates.
//! Sibling intents in a domain use conflicting rules over the same skills,
//! so a model that under-fits a rare intent tends to apply a frequent
//! sibling's rule to it.
//!
//! The world (keywords, rules) depends only on `seed`; the samples depend on
//! `(seed, stream, shard)`, so train and test files drawn with different
//! streams share one world.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, Hypothesis, QuerySignals, Sample};
use crate::error::{Error, Result};
use crate::slicing::SliceConfig;

pub const FORMAT_VERSION: u32 = 1;
const SHARD_SIZE: usize = 4096;
const FILLER_TOKENS: usize = 200;
const DOMAIN_KEYWORDS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficConfig {
    pub num_intents: usize,
    pub zipf_exponent: f64,
    pub tail_intents: Vec<String>,
    pub vocab_size: usize,
    pub utterance_length_range: (usize, usize),
    pub hypotheses_range: (usize, usize),
    pub num_skills: usize,
    pub label_noise_rate: f64,
    pub seed: u64,
    pub num_samples: usize,
    /// Sample stream; the world is shared across streams of one seed.
    #[serde(default)]
    pub stream: u64,
    pub num_domains: usize,
    pub num_devices: usize,
    pub num_context: usize,
    pub keywords_per_intent: usize,
    /// Probability that a token is drawn from the intent's own keywords.
    pub intent_token_rate: f64,
    /// Probability that a token is drawn from the shared domain keywords.
    pub domain_token_rate: f64,
    /// Probability that an intent-keyword draw uses a sibling's keyword.
    pub intent_overlap: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            num_intents: 40,
            zipf_exponent: 1.2,
            tail_intents: default_tail_intents(40),
            vocab_size: 1000,
            utterance_length_range: (3, 7),
            hypotheses_range: (2, 5),
            num_skills: 40,
            label_noise_rate: 0.0,
            seed: 7,
            num_samples: 100_000,
            stream: 0,
            num_domains: 10,
            num_devices: 4,
            num_context: 8,
            keywords_per_intent: 8,
            intent_token_rate: 0.3,
            domain_token_rate: 0.35,
            intent_overlap: 0.1,
        }
    }
}

pub fn intent_name(rank: usize) -> String {
    format!("intent_{rank:02}")
}

/// Every second intent from rank 2 on: twenty monitored intents over forty
/// that span high, middle and low traffic.
pub fn default_tail_intents(num_intents: usize) -> Vec<String> {
    (2..=num_intents).step_by(2).map(intent_name).collect()
}

impl TrafficConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_intents == 0 || self.num_domains == 0 || self.num_domains > self.num_intents {
            return err(format!(
                "need 0 < num_domains ({}) ≤ num_intents ({})",
                self.num_domains, self.num_intents
            ));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return err(format!("zipf_exponent must be ≥ 0, got {}", self.zipf_exponent));
        }
        let (lmin, lmax) = self.utterance_length_range;
        if lmin == 0 || lmin > lmax {
            return err(format!("bad utterance_length_range ({lmin}, {lmax})"));
        }
        let (nmin, nmax) = self.hypotheses_range;
        if nmin == 0 || nmin > nmax {
            return err(format!("bad hypotheses_range ({nmin}, {nmax})"));
        }
        if !(0.0..=1.0).contains(&self.label_noise_rate) {
            return err(format!("label_noise_rate {} outside [0, 1]", self.label_noise_rate));
        }
        for (name, p) in [
            ("intent_token_rate", self.intent_token_rate),
            ("domain_token_rate", self.domain_token_rate),
            ("intent_overlap", self.intent_overlap),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.intent_token_rate + self.domain_token_rate > 1.0 {
            return err("intent_token_rate + domain_token_rate exceeds 1".into());
        }
        let needed = FILLER_TOKENS + self.num_domains * DOMAIN_KEYWORDS + self.num_intents * self.keywords_per_intent;
        if self.keywords_per_intent == 0 || self.vocab_size < needed {
            return err(format!("vocab_size {} below the {needed} tokens the world needs", self.vocab_size));
        }
        if self.num_skills < self.num_domains * self.skills_per_domain() || self.skills_per_domain() < 2 {
            return err(format!(
                "num_skills {} must give every one of {} domains at least two skills",
                self.num_skills, self.num_domains
            ));
        }
        if self.num_devices == 0 || self.num_context == 0 {
            return err("num_devices and num_context must be positive".into());
        }
        let inventory: Vec<String> = (1..=self.num_intents).map(intent_name).collect();
        if let Some(t) = self.tail_intents.iter().find(|t| !inventory.contains(t)) {
            return err(format!("tail intent {t:?} not in the generated inventory"));
        }
        Ok(())
    }

    fn skills_per_domain(&self) -> usize {
        self.num_skills / self.num_domains
    }

    pub fn slice_config(&self) -> Result<SliceConfig> {
        SliceConfig::new(self.tail_intents.clone())
    }

    /// Backbone inventory sizes matching this world.
    pub fn backbone_config(&self, d: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size: self.vocab_size,
            num_devices: self.num_devices,
            num_context: self.num_context,
            num_skills: self.num_skills,
            num_interpretation: self.num_intents + self.num_domains,
            d,
            ..BackboneConfig::default()
        }
    }

    /// Intent probabilities by rank, `∝ rank^-s`.
    pub fn zipf_weights(&self) -> Vec<f64> {
        let w: Vec<f64> = (1..=self.num_intents)
            .map(|r| (r as f64).powf(-self.zipf_exponent))
            .collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }
}

struct IntentSpec {
    name: String,
    domain: usize,
    keywords: Vec<usize>,
    /// Skill served per device type.
    rule: Vec<usize>,
}

struct World {
    intents: Vec<IntentSpec>,
    domain_keywords: Vec<Vec<usize>>,
    domain_skills: Vec<Vec<usize>>,
    domain_members: Vec<Vec<usize>>,
}

fn world(cfg: &TrafficConfig) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut next = FILLER_TOKENS;
    let mut take = |n: usize| {
        let v: Vec<usize> = (next..next + n).collect();
        next += n;
        v
    };
    let domain_keywords: Vec<Vec<usize>> = (0..cfg.num_domains).map(|_| take(DOMAIN_KEYWORDS)).collect();
    let per = cfg.skills_per_domain();
    let domain_skills: Vec<Vec<usize>> = (0..cfg.num_domains)
        .map(|d| (d * per..(d + 1) * per).collect())
        .collect();
    let mut domain_members = vec![Vec::new(); cfg.num_domains];
    let intents = (0..cfg.num_intents)
        .map(|j| {
            let domain = j % cfg.num_domains;
            domain_members[domain].push(j);
            let rule = (0..cfg.num_devices)
                .map(|_| *domain_skills[domain].choose(&mut rng).expect("skills"))
                .collect();
            IntentSpec {
                name: intent_name(j + 1),
                domain,
                keywords: take(cfg.keywords_per_intent),
                rule,
            }
        })
        .collect();
    World {
        intents,
        domain_keywords,
        domain_skills,
        domain_members,
    }
}

fn shard_rng(seed: u64, stream: u64, shard: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.to_le_bytes());
    h.update(shard.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn draw_sample(cfg: &TrafficConfig, w: &World, zipf: &WeightedIndex<f64>, index: usize, rng: &mut impl Rng) -> Sample {
    let j = zipf.sample(rng);
    let spec = &w.intents[j];
    let siblings: Vec<usize> = w.domain_members[spec.domain]
        .iter()
        .copied()
        .filter(|&s| s != j)
        .collect();

    let len = rng.random_range(cfg.utterance_length_range.0..=cfg.utterance_length_range.1);
    let own_keyword = |rng: &mut dyn rand::RngCore| *spec.keywords.choose(rng).expect("keywords");
    let mut tokens = Vec::with_capacity(len);
    for _ in 0..len {
        let u: f64 = rng.random();
        let tok = if u < cfg.intent_token_rate {
            if !siblings.is_empty() && rng.random_bool(cfg.intent_overlap) {
                let s = *siblings.choose(rng).expect("sibling");
                *w.intents[s].keywords.choose(rng).expect("keywords")
            } else {
                own_keyword(rng)
            }
        } else if u < cfg.intent_token_rate + cfg.domain_token_rate {
            *w.domain_keywords[spec.domain].choose(rng).expect("domain keywords")
        } else {
            rng.random_range(0..FILLER_TOKENS)
        };
        tokens.push(tok);
    }
    // every utterance carries at least one of its own keywords
    let pos = rng.random_range(0..len);
    tokens[pos] = own_keyword(rng);

    let device = rng.random_range(0..cfg.num_devices);
    let context: Vec<usize> = (0..rng.random_range(0..=2))
        .map(|_| rng.random_range(0..cfg.num_context))
        .collect();

    let make = |intent: usize, skill: usize| Hypothesis {
        intent: w.intents[intent].name.clone(),
        skill,
        interpretation_features: vec![intent, cfg.num_intents + w.intents[intent].domain],
    };
    let truth = (j, spec.rule[device]);
    let mut pairs = vec![truth];
    let n = rng.random_range(cfg.hypotheses_range.0..=cfg.hypotheses_range.1);
    let skills = &w.domain_skills[spec.domain];
    let mut attempts = 0;
    while pairs.len() < n && attempts < 64 {
        attempts += 1;
        let u: f64 = rng.random();
        let cand = if u < 0.5 {
            (j, *skills.choose(rng).expect("skills"))
        } else if u < 0.85 && !siblings.is_empty() {
            let s = *siblings.choose(rng).expect("sibling");
            let skill = if rng.random_bool(0.5) {
                w.intents[s].rule[device]
            } else {
                *skills.choose(rng).expect("skills")
            };
            (s, skill)
        } else {
            let o = rng.random_range(0..cfg.num_intents);
            let os = &w.domain_skills[w.intents[o].domain];
            (o, *os.choose(rng).expect("skills"))
        };
        if !pairs.contains(&cand) {
            pairs.push(cand);
        }
    }
    pairs.shuffle(rng);
    let mut g = pairs.iter().position(|&p| p == truth).expect("truth present");
    if cfg.label_noise_rate > 0.0 && rng.random_bool(cfg.label_noise_rate) {
        let same: Vec<usize> = (0..pairs.len()).filter(|&i| i != g && pairs[i].0 == j).collect();
        if let Some(&alt) = same.choose(rng) {
            g = alt;
        }
    }
    let hypotheses: Vec<Hypothesis> = pairs.iter().map(|&(i, s)| make(i, s)).collect();
    Sample {
        id: format!("s{}-{}-{index:07}", cfg.seed, cfg.stream),
        signals: QuerySignals {
            utterance_tokens: tokens,
            device_type: device,
            shared_context: context,
        },
        ground_truth_intent: hypotheses[g].intent.clone(),
        hypotheses,
        ground_truth_index: g,
    }
}

/// Draws `cfg.num_samples` samples. Output is independent of thread count.
pub fn generate_samples(cfg: &TrafficConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let w = world(cfg);
    let zipf = WeightedIndex::new(cfg.zipf_weights()).map_err(|e| Error::Config(e.to_string()))?;
    let shards = cfg.num_samples.div_ceil(SHARD_SIZE);
    let parts: Vec<Vec<Sample>> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = shard_rng(cfg.seed, cfg.stream, s as u64);
            let end = ((s + 1) * SHARD_SIZE).min(cfg.num_samples);
            (s * SHARD_SIZE..end)
                .map(|i| draw_sample(cfg, &w, &zipf, i, &mut rng))
                .collect()
        })
        .collect();
    Ok(parts.concat())
}

/// Flat on-disk record, one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub format_version: u32,
    pub id: String,
    pub utterance_tokens: Vec<usize>,
    pub device_type: usize,
    #[serde(default)]
    pub shared_context: Vec<usize>,
    pub intent: String,
    pub hypotheses: Vec<Hypothesis>,
    pub ground_truth_index: usize,
}

impl From<&Sample> for Record {
    fn from(s: &Sample) -> Self {
        Record {
            format_version: FORMAT_VERSION,
            id: s.id.clone(),
            utterance_tokens: s.signals.utterance_tokens.clone(),
            device_type: s.signals.device_type,
            shared_context: s.signals.shared_context.clone(),
            intent: s.ground_truth_intent.clone(),
            hypotheses: s.hypotheses.clone(),
            ground_truth_index: s.ground_truth_index,
        }
    }
}

impl TryFrom<Record> for Sample {
    type Error = Error;

    fn try_from(r: Record) -> Result<Sample> {
        if r.format_version != FORMAT_VERSION {
            return Err(Error::Input(format!(
                "record {} has format version {}, expected {FORMAT_VERSION}",
                r.id, r.format_version
            )));
        }
        let s = Sample {
            id: r.id,
            signals: QuerySignals {
                utterance_tokens: r.utterance_tokens,
                device_type: r.device_type,
                shared_context: r.shared_context,
            },
            hypotheses: r.hypotheses,
            ground_truth_index: r.ground_truth_index,
            ground_truth_intent: r.intent,
        };
        s.check()?;
        Ok(s)
    }
}

/// Canonical JSON-lines encoding of a dataset.
pub fn encode_jsonl(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * 256);
    for s in samples {
        serde_json::to_writer(&mut out, &Record::from(s)).expect("in-memory write");
        out.push(b'\n');
    }
    out
}

/// SHA-256 of the canonical encoding, hex.
pub fn dataset_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(serde_json::to_vec(&Record::from(s)).expect("in-memory write"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        serde_json::to_writer(&mut w, &Record::from(s)).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Json {
            context: format!("{}:{}", path.display(), n + 1),
            source: e,
        })?;
        out.push(Sample::try_from(rec)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub path: PathBuf,
    pub sample_count: usize,
    pub per_intent_counts: BTreeMap<String, usize>,
    pub sha256: String,
    pub seed: u64,
    #[serde(default)]
    pub config: Option<TrafficConfig>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn describe(path: &Path, samples: &[Sample], seed: u64, config: Option<TrafficConfig>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            path: path.to_path_buf(),
            sample_count: samples.len(),
            per_intent_counts: intent_counts(samples),
            sha256: dataset_hash(samples),
            seed,
            config,
            warnings: Vec::new(),
        }
    }

    pub fn sidecar_path(dataset: &Path) -> PathBuf {
        let mut p = dataset.as_os_str().to_owned();
        p.push(".manifest.json");
        PathBuf::from(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })
    }
}

pub fn intent_counts(samples: &[Sample]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        *m.entry(s.ground_truth_intent.clone()).or_insert(0) += 1;
    }
    m
}

/// Generates, writes the dataset and its manifest sidecar.
pub fn generate(cfg: &TrafficConfig, path: &Path) -> Result<DatasetManifest> {
    let samples = generate_samples(cfg)?;
    write_dataset(path, &samples)?;
    let manifest = DatasetManifest::describe(path, &samples, cfg.seed, Some(cfg.clone()));
    manifest.save(&DatasetManifest::sidecar_path(path))?;
    Ok(manifest)
}

/// Seeded shuffle, then the first `round(ratio·N)` samples go to training.
pub fn split(dataset: &[Sample], ratio: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Split(format!("ratio {ratio} outside (0, 1)")));
    }
    let cut = (ratio * dataset.len() as f64).round() as usize;
    if cut == 0 || cut == dataset.len() {
        return Err(Error::Split(format!(
            "{} samples at ratio {ratio} leave an empty part",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..cut].iter().map(|&i| dataset[i].clone()).collect();
    let val = order[cut..].iter().map(|&i| dataset[i].clone()).collect();
    Ok((train, val))
}

/// Duplicates monitored tail samples until each tail intent's count is
/// `round(count · multiplier)`, then reshuffles. Empty tail slices are
/// skipped with a warning.
pub fn upsample(
    dataset: &[Sample],
    config: &SliceConfig,
    multiplier: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<String>)> {
    if !(multiplier >= 1.0 && multiplier.is_finite()) {
        return Err(Error::Parameter(format!("upsample multiplier must be finite and ≥ 1, got {multiplier}")));
    }
    let mut out = dataset.to_vec();
    let mut warnings = Vec::new();
    for intent in config.monitored_intents() {
        let members: Vec<&Sample> = dataset.iter().filter(|s| &s.ground_truth_intent == intent).collect();
        if members.is_empty() {
            warnings.push(format!("tail slice {intent:?} is empty; not upsampled"));
            continue;
        }
        let target = (members.len() as f64 * multiplier).round() as usize;
        for copy in 0..target.saturating_sub(members.len()) {
            let mut s = members[copy % members.len()].clone();
            s.id = format!("{}#up{}", s.id, copy / members.len() + 1);
            out.push(s);
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrafficConfig {
        TrafficConfig {
            num_samples: 500,
            ..TrafficConfig::default()
        }
    }

    #[test]
    fn samples_satisfy_invariants() {
        let cfg = small();
        let bcfg = cfg.backbone_config(8);
        for s in generate_samples(&cfg).unwrap() {
            bcfg.check_sample(&s).unwrap();
            let n = s.hypotheses.len();
            assert!((2..=5).contains(&n));
            let l = s.signals.utterance_tokens.len();
            assert!((3..=7).contains(&l));
        }
    }

    #[test]
    fn streams_share_a_world_but_not_samples() {
        let a = generate_samples(&small()).unwrap();
        let b = generate_samples(&TrafficConfig { stream: 1, ..small() }).unwrap();
        assert_ne!(a[0].signals, b[0].signals);
        assert_eq!(a, generate_samples(&small()).unwrap());
    }

    #[test]
    fn config_errors() {
        let bad = TrafficConfig {
            utterance_length_range: (5, 2),
            ..small()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrafficConfig {
            tail_intents: vec!["nope".into()],
            ..small()
        };
        assert!(bad.validate().is_err());
        let bad = TrafficConfig {
            hypotheses_range: (0, 3),
            ..small()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn split_examples() {
        let data = generate_samples(&TrafficConfig {
            num_samples: 100,
            ..small()
        })
        .unwrap();
        let (tr, va) = split(&data, 0.9, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        assert_eq!(split(&data, 0.9, 3).unwrap(), (tr.clone(), va.clone()));
        let mut ids: Vec<&str> = tr.iter().chain(&va).map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        let mut orig: Vec<&str> = data.iter().map(|s| s.id.as_str()).collect();
        orig.sort_unstable();
        assert_eq!(ids, orig);
        assert!(matches!(split(&data, 1.0, 3), Err(Error::Split(_))));
        assert!(matches!(split(&data[..1], 0.5, 3), Err(Error::Split(_))));
    }

    #[test]
    fn upsample_counts() {
        let data = generate_samples(&small()).unwrap();
        let cfg = SliceConfig::new(vec!["intent_02".into(), "intent_40".into(), "intent_39".into()]).unwrap();
        let before = intent_counts(&data);
        let (same, _) = upsample(&data, &cfg, 1.0, 1).unwrap();
        assert_eq!(intent_counts(&same), before);
        assert_eq!(same.len(), data.len());

        let (up, warnings) = upsample(&data, &cfg, 3.0, 1).unwrap();
        let after = intent_counts(&up);
        for (intent, &c) in &before {
            let expect = if cfg.slice_of(intent).is_some() { 3 * c } else { c };
            assert_eq!(after[intent], expect, "{intent}");
        }
        assert_eq!(warnings.len(), 3 - before.keys().filter(|k| cfg.slice_of(k).is_some()).count());
        assert!(upsample(&data, &cfg, 0.5, 1).is_err());
    }
}
