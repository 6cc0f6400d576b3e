//! Percentage-point comparisons of evaluation reports against a baseline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::eval::EvalReport;

/// Training-volume strata for tail slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeBands {
    /// Counts below this are "low".
    pub low: usize,
    /// Counts at or above this are "high".
    pub high: usize,
}

impl Default for VolumeBands {
    fn default() -> Self {
        Self { low: 1_000, high: 10_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    High,
    Mid,
    Low,
}

impl VolumeBands {
    pub fn band(&self, count: usize) -> Band {
        if count >= self.high {
            Band::High
        } else if count >= self.low {
            Band::Mid
        } else {
            Band::Low
        }
    }

    pub fn label(&self, b: Band) -> String {
        let k = |n: usize| {
            if n % 1000 == 0 {
                format!("{}K", n / 1000)
            } else {
                n.to_string()
            }
        };
        match b {
            Band::High => format!("over {}", k(self.high)),
            Band::Mid => format!("{} - {}", k(self.low), k(self.high)),
            Band::Low => format!("below {}", k(self.low)),
        }
    }
}

/// Delta `run − baseline` in percentage points; undefined if either is.
pub fn delta_pp(run: Option<f64>, baseline: Option<f64>) -> Option<f64> {
    Some(100.0 * (run? - baseline?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub overall_ra: f64,
    pub overall_delta: f64,
    pub macro_tail_ra: Option<f64>,
    pub macro_tail_delta: Option<f64>,
    /// Tail slices whose delta is below `−degrade_threshold` points.
    pub degraded: usize,
    pub improved: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub slice: usize,
    pub name: String,
    pub support: usize,
    pub train_support: Option<usize>,
    pub band: Option<Band>,
    pub baseline_ra: Option<f64>,
    /// One delta per compared run, in points.
    pub deltas: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub bands: VolumeBands,
    pub runs: Vec<RunSummary>,
    pub slices: Vec<SliceRow>,
}

/// A slice counts as degraded when its delta is below `−DEGRADE_POINTS`.
pub const DEGRADE_POINTS: f64 = 0.05;

/// Compares `runs` against `baseline`. Every report must come from the same
/// test file and slice layout.
pub fn compare(baseline: &EvalReport, runs: &[&EvalReport], bands: VolumeBands) -> Result<Comparison> {
    for r in runs {
        if r.test_hash != baseline.test_hash {
            return Err(Error::Comparison(format!(
                "run {} was evaluated on test set {}, baseline {} on {}",
                r.run_id, r.test_hash, baseline.run_id, baseline.test_hash
            )));
        }
        let names = |e: &EvalReport| e.slices.iter().map(|s| s.name.clone()).collect::<Vec<_>>();
        if names(r) != names(baseline) {
            return Err(Error::Comparison(format!(
                "run {} uses a different slice layout from baseline {}",
                r.run_id, baseline.run_id
            )));
        }
    }
    let summaries = runs
        .iter()
        .map(|r| {
            let tail: Vec<Option<f64>> = (1..baseline.slices.len())
                .map(|i| delta_pp(r.slices[i].ra, baseline.slices[i].ra))
                .collect();
            RunSummary {
                run_id: r.run_id.clone(),
                overall_ra: r.overall_ra,
                overall_delta: 100.0 * (r.overall_ra - baseline.overall_ra),
                macro_tail_ra: r.macro_tail_ra(),
                macro_tail_delta: delta_pp(r.macro_tail_ra(), baseline.macro_tail_ra()),
                degraded: tail.iter().flatten().filter(|&&d| d < -DEGRADE_POINTS).count(),
                improved: tail.iter().flatten().filter(|&&d| d > DEGRADE_POINTS).count(),
            }
        })
        .collect();
    let slices = baseline
        .slices
        .iter()
        .map(|b| SliceRow {
            slice: b.slice,
            name: b.name.clone(),
            support: b.support,
            train_support: b.train_support,
            band: (b.slice > 0).then_some(()).and(b.train_support).map(|c| bands.band(c)),
            baseline_ra: b.ra,
            deltas: runs.iter().map(|r| delta_pp(r.slices[b.slice].ra, b.ra)).collect(),
        })
        .collect();
    Ok(Comparison {
        baseline: baseline.run_id.clone(),
        bands,
        runs: summaries,
        slices,
    })
}

fn opt(v: Option<f64>, signed: bool) -> String {
    match v {
        None => "undefined".into(),
        Some(x) if signed => format!("{x:+.2}"),
        Some(x) => format!("{x:.2}"),
    }
}

impl Comparison {
    /// One row per run: overall and macro-tail deltas in points.
    pub fn summary_table(&self) -> String {
        let w = self.runs.iter().map(|r| r.run_id.len()).max().unwrap_or(3).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "deltas in points vs {}", self.baseline);
        let _ = writeln!(
            out,
            "{:<w$}  {:>10}  {:>10}  {:>12}  {:>8}  {:>8}",
            "model", "overall", "all", "tail (macro)", "degraded", "improved"
        );
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{:<w$}  {:>10}  {:>10}  {:>12}  {:>8}  {:>8}",
                r.run_id,
                format!("{:.2}", 100.0 * r.overall_ra),
                format!("{:+.2}", r.overall_delta),
                opt(r.macro_tail_delta, true),
                r.degraded,
                r.improved
            );
        }
        out
    }

    /// Per-slice deltas grouped by volume band.
    pub fn slice_table(&self) -> String {
        let w = self.slices.iter().map(|s| s.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let mut head = format!("{:<w$}  {:>10}  {:>8}  {:>8}  {:>9}", "slice", "band", "train", "test", "base RA");
        for r in &self.runs {
            let _ = write!(head, "  {:>9}", r.run_id);
        }
        let _ = writeln!(out, "{head}");
        let mut rows: Vec<&SliceRow> = self.slices.iter().collect();
        rows.sort_by_key(|r| (r.band, r.slice));
        for s in rows {
            let band = s.band.map_or("-".to_string(), |b| self.bands.label(b));
            let train = s.train_support.map_or("-".to_string(), |c| c.to_string());
            let mut line = format!(
                "{:<w$}  {:>10}  {:>8}  {:>8}  {:>9}",
                s.name,
                band,
                train,
                s.support,
                opt(s.baseline_ra.map(|r| 100.0 * r), false)
            );
            for d in &s.deltas {
                let _ = write!(line, "  {:>9}", opt(*d, true));
            }
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("model,overall_ra,overall_delta,macro_tail_ra,macro_tail_delta,degraded,improved\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{:.4},{:.2},{},{},{},{}",
                r.run_id,
                100.0 * r.overall_ra,
                r.overall_delta,
                r.macro_tail_ra.map_or("undefined".into(), |m| format!("{:.4}", 100.0 * m)),
                opt(r.macro_tail_delta, false),
                r.degraded,
                r.improved
            );
        }
        out
    }

    pub fn slices_csv(&self) -> String {
        let mut out = String::from("slice,name,band,train_support,support,baseline_ra");
        for r in &self.runs {
            let _ = write!(out, ",{}", r.run_id);
        }
        out.push('\n');
        for s in &self.slices {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                s.slice,
                s.name,
                s.band.map_or(String::new(), |b| self.bands.label(b)),
                s.train_support.map_or(String::new(), |c| c.to_string()),
                s.support,
                opt(s.baseline_ra.map(|r| 100.0 * r), false)
            );
            for d in &s.deltas {
                let _ = write!(out, ",{}", opt(*d, false));
            }
            out.push('\n');
        }
        out
    }
}
