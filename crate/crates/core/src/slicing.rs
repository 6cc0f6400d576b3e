//! Intent-equality slice functions and weak-supervision slice labels.
//!
//! Slice 0 is the base slice; slices `1..k` correspond to the monitored tail
//! intents in configuration order. Labels come from the sample's
//! ground-truth intent and are only used for training and bookkeeping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Sample;
use crate::error::{Error, Result};

/// How the base slice relates to the tail slices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseSlice {
    /// Base = samples matching no tail function; labels are one-hot.
    #[default]
    Complement,
    /// Base covers every sample, tails overlap it.
    AllCovering,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceConfig {
    monitored_intents: Vec<String>,
    #[serde(default)]
    pub base: BaseSlice,
}

impl SliceConfig {
    pub fn new(monitored_intents: Vec<String>) -> Result<Self> {
        for (i, a) in monitored_intents.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Config("empty monitored intent".into()));
            }
            if monitored_intents[..i].contains(a) {
                return Err(Error::Config(format!("duplicate monitored intent {a:?}")));
            }
        }
        Ok(Self {
            monitored_intents,
            base: BaseSlice::Complement,
        })
    }

    pub fn with_base(mut self, base: BaseSlice) -> Self {
        self.base = base;
        self
    }

    pub fn monitored_intents(&self) -> &[String] {
        &self.monitored_intents
    }

    /// Total slice count including the base slice.
    pub fn k(&self) -> usize {
        self.monitored_intents.len() + 1
    }

    /// Slice id (`1..k`) of a tail intent.
    pub fn slice_of(&self, intent: &str) -> Option<usize> {
        self.monitored_intents.iter().position(|m| m == intent).map(|i| i + 1)
    }

    pub fn slice_name(&self, id: usize) -> &str {
        if id == 0 {
            "base"
        } else {
            &self.monitored_intents[id - 1]
        }
    }

    /// Parses one intent per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim_end)
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn to_text(&self) -> String {
        self.monitored_intents
            .iter()
            .map(|i| format!("{i}\n"))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Membership labels `γ ∈ {0,1}^k`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SliceLabelVector {
    gamma: Vec<u8>,
}

impl SliceLabelVector {
    pub fn as_slice(&self) -> &[u8] {
        &self.gamma
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.gamma[i] == 1
    }

    /// True when some tail slice is active.
    pub fn is_tail(&self) -> bool {
        self.gamma[1..].contains(&1)
    }

    /// The tail slice, or 0 for base-only samples.
    pub fn primary_slice(&self) -> usize {
        self.gamma[1..]
            .iter()
            .position(|&g| g == 1)
            .map_or(0, |i| i + 1)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.gamma.iter().map(|&g| g as f64).collect()
    }
}

impl From<Vec<u8>> for SliceLabelVector {
    fn from(gamma: Vec<u8>) -> Self {
        Self { gamma }
    }
}

pub fn assign_slices(sample: &Sample, config: &SliceConfig) -> SliceLabelVector {
    let mut gamma = vec![0u8; config.k()];
    let tail = config.slice_of(&sample.ground_truth_intent);
    if let Some(i) = tail {
        gamma[i] = 1;
    }
    gamma[0] = match config.base {
        BaseSlice::Complement => u8::from(tail.is_none()),
        BaseSlice::AllCovering => 1,
    };
    SliceLabelVector { gamma }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub total: usize,
    /// Set when the dataset was empty; counts are zero and fractions empty.
    pub empty: bool,
}

pub fn slice_stats<'a>(dataset: impl IntoIterator<Item = &'a Sample>, config: &SliceConfig) -> SliceStats {
    let mut counts = vec![0usize; config.k()];
    let mut total = 0;
    for s in dataset {
        counts[assign_slices(s, config).primary_slice()] += 1;
        total += 1;
    }
    if total == 0 {
        return SliceStats {
            counts,
            fractions: Vec::new(),
            total,
            empty: true,
        };
    }
    let fractions = counts.iter().map(|&c| c as f64 / total as f64).collect();
    SliceStats {
        counts,
        fractions,
        total,
        empty: false,
    }
}
