//! Replication accuracy, evaluation reports and indicator ranking quality.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, select_hypothesis, Sample};
use crate::datagen::dataset_hash;
use crate::error::{Error, Result};
use crate::numerics::Graph;
use crate::slice_aware::{self};
use crate::slicing::{assign_slices, SliceConfig};

use super::checkpoint::Model;
use super::config::ModelKind;
use super::train::EVAL_BATCH;

pub const REPORT_VERSION: u32 = 1;

/// Per-sample routing scores, plus membership likelihoods for slice-aware
/// models.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scored {
    pub scores: Vec<Vec<f64>>,
    pub membership: Option<Vec<Vec<f64>>>,
}

/// Scores every sample: `predict_base` for the backbone, `predict_final` for
/// the slice-aware model.
pub fn score(model: &Model, samples: &[Sample]) -> Result<Scored> {
    let mut out = Scored::default();
    let mut membership = Vec::new();
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::new();
        let bb = model.backbone().bind(&mut g, false);
        let enc = backbone::encode_batch(&mut g, model.backbone(), &bb, &refs)?;
        let flat = match model {
            Model::Backbone(_) => backbone::predict_base(&mut g, &bb, enc.x)?,
            Model::SliceAware(m) => {
                let heads = m.heads.bind(&mut g, false);
                let fwd = slice_aware::forward_batch(&mut g, m, &bb, &heads, enc.x, &enc.layout)?;
                let k = m.k();
                membership.extend(g.value(fwd.membership).chunks(k).map(<[f64]>::to_vec));
                fwd.final_scores
            }
        };
        let v = g.value(flat);
        for b in 0..chunk.len() {
            out.scores.push(v[enc.layout.rows(b)].to_vec());
        }
    }
    if matches!(model, Model::SliceAware(_)) {
        out.membership = Some(membership);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceAccuracy {
    pub slice: usize,
    pub name: String,
    pub correct: usize,
    pub support: usize,
    /// `None` (undefined) when the slice has no test samples.
    pub ra: Option<f64>,
    /// Training samples in the slice, when known.
    #[serde(default)]
    pub train_support: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub slice: usize,
    pub predicted: usize,
    pub truth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub run_id: String,
    pub model_kind: Option<ModelKind>,
    pub test_hash: String,
    pub overall_correct: usize,
    pub test_size: usize,
    pub overall_ra: f64,
    pub slices: Vec<SliceAccuracy>,
    pub predictions: Vec<Prediction>,
}

fn ratio(correct: usize, support: usize) -> Option<f64> {
    (support > 0).then(|| correct as f64 / support as f64)
}

/// Builds the report from predicted indices. Slice `i` counts the samples
/// whose label vector activates `i`.
pub fn replication_accuracy(
    run_id: &str,
    predicted: &[usize],
    test: &[Sample],
    slices: &SliceConfig,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    if predicted.len() != test.len() {
        return Err(Error::dim("replication_accuracy", &[predicted.len()], &[test.len()]));
    }
    let k = slices.k();
    let mut correct = vec![0usize; k];
    let mut support = vec![0usize; k];
    let mut overall = 0;
    let mut predictions = Vec::with_capacity(test.len());
    for (s, &p) in test.iter().zip(predicted) {
        let gamma = assign_slices(s, slices);
        let hit = p == s.ground_truth_index;
        overall += usize::from(hit);
        for i in (0..k).filter(|&i| gamma.get(i)) {
            support[i] += 1;
            correct[i] += usize::from(hit);
        }
        predictions.push(Prediction {
            id: s.id.clone(),
            slice: gamma.primary_slice(),
            predicted: p,
            truth: s.ground_truth_index,
        });
    }
    Ok(EvalReport {
        format_version: REPORT_VERSION,
        run_id: run_id.to_string(),
        model_kind: None,
        test_hash: dataset_hash(test),
        overall_correct: overall,
        test_size: test.len(),
        overall_ra: overall as f64 / test.len() as f64,
        slices: (0..k)
            .map(|i| SliceAccuracy {
                slice: i,
                name: slices.slice_name(i).to_string(),
                correct: correct[i],
                support: support[i],
                ra: ratio(correct[i], support[i]),
                train_support: None,
            })
            .collect(),
        predictions,
    })
}

/// Scores `test` with `model` and builds its report.
pub fn evaluate(model: &Model, run_id: &str, test: &[Sample], slices: &SliceConfig) -> Result<(EvalReport, Scored)> {
    let scored = score(model, test)?;
    let predicted: Vec<usize> = scored.scores.iter().map(|s| select_hypothesis(s)).collect();
    Ok((replication_accuracy(run_id, &predicted, test, slices)?, scored))
}

impl EvalReport {
    pub fn with_kind(mut self, kind: ModelKind) -> Self {
        self.model_kind = Some(kind);
        self
    }

    /// Records per-slice training counts (used for volume bands).
    pub fn with_train_counts(mut self, train: &[Sample], slices: &SliceConfig) -> Self {
        let mut counts = vec![0usize; slices.k()];
        for s in train {
            let g = assign_slices(s, slices);
            for (i, c) in counts.iter_mut().enumerate() {
                *c += usize::from(g.get(i));
            }
        }
        for sa in &mut self.slices {
            sa.train_support = Some(counts[sa.slice]);
        }
        self
    }

    /// Mean RA over tail slices with a defined RA.
    pub fn macro_tail_ra(&self) -> Option<f64> {
        let defined: Vec<f64> = self.slices.iter().skip(1).filter_map(|s| s.ra).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn slice_ra(&self, slice: usize) -> Option<f64> {
        self.slices.get(slice).and_then(|s| s.ra)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })
    }

    /// Aligned per-slice table in percent.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "run {}  overall RA {:.2}%  ({} / {})",
            self.run_id,
            100.0 * self.overall_ra,
            self.overall_correct,
            self.test_size
        );
        let w = self.slices.iter().map(|s| s.name.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "{:>5}  {:<w$}  {:>9}  {:>8}", "slice", "name", "RA (%)", "support");
        for s in &self.slices {
            let ra = s.ra.map_or("undefined".to_string(), |r| format!("{:.2}", 100.0 * r));
            let _ = writeln!(out, "{:>5}  {:<w$}  {:>9}  {:>8}", s.slice, s.name, ra, s.support);
        }
        if let Some(m) = self.macro_tail_ra() {
            let _ = writeln!(out, "macro tail RA {:.2}%", 100.0 * m);
        }
        out
    }
}

/// Area under the ROC curve of `scores` against binary `labels`, with tied
/// scores counted as half. `None` unless both classes are present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over ties, then Mann-Whitney U
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if labels[o] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}
