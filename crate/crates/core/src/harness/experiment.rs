//! End-to-end runs: data, the four-way comparison and the attention sweep.

use rayon::prelude::*;

use crate::backbone::{BackboneParams, Sample};
use crate::datagen::{self, read_dataset, TrafficConfig};
use crate::error::{Error, Result};
use crate::slice_aware::{AttentionConfig, AttentionMethod};
use crate::slicing::SliceConfig;

use super::checkpoint::Model;
use super::compare::{compare, Comparison, VolumeBands};
use super::config::{ExperimentConfig, ModelKind};
use super::eval::{evaluate, EvalReport, Scored};
use super::train::{train_backbone, train_slice_aware, TrainReport};

pub struct Datasets {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Datasets {
    /// Draws the training file (stream 0) and the test file (stream 1) from
    /// one world, then splits the training file into train and validation.
    pub fn synthesize(cfg: &ExperimentConfig) -> Result<Self> {
        let train_file = datagen::generate_samples(&cfg.traffic)?;
        let test = datagen::generate_samples(&TrafficConfig {
            stream: 1,
            num_samples: cfg.test_samples,
            ..cfg.traffic.clone()
        })?;
        Self::from_parts(cfg, &train_file, test)
    }

    /// Reads the configured training and test files.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let missing = |what: &str| Error::Config(format!("paths.{what} is not set"));
        let train_file = read_dataset(cfg.train_path.as_deref().ok_or_else(|| missing("train"))?)?;
        let test = read_dataset(cfg.test_path.as_deref().ok_or_else(|| missing("test"))?)?;
        Self::from_parts(cfg, &train_file, test)
    }

    fn from_parts(cfg: &ExperimentConfig, train_file: &[Sample], test: Vec<Sample>) -> Result<Self> {
        let (train, validation) = datagen::split(train_file, cfg.train_fraction, cfg.seed)?;
        Ok(Self {
            train,
            validation,
            test,
        })
    }
}

/// Trains one model kind. S-kinds need the backbone they extend.
pub fn train_kind(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    data: &Datasets,
    slices: &SliceConfig,
    backbone: Option<&BackboneParams>,
) -> Result<(Model, TrainReport, Vec<String>)> {
    let mut warnings = Vec::new();
    let upsampled;
    let train: &[Sample] = if kind.is_upsampled() {
        let (up, w) = datagen::upsample(&data.train, slices, cfg.upsample_multiplier, cfg.seed)?;
        warnings = w;
        upsampled = up;
        &upsampled
    } else {
        &data.train
    };
    let (model, report) = if kind.is_slice_aware() {
        let bb = backbone.ok_or_else(|| {
            Error::Config(format!("{} needs a trained {} backbone", kind.label(), kind.backbone_kind().label()))
        })?;
        let (m, r) = train_slice_aware(cfg, bb.clone(), slices, train, &data.validation)?;
        (Model::SliceAware(m), r)
    } else {
        let (p, r) = train_backbone(cfg, train, &data.validation)?;
        (Model::Backbone(p), r)
    };
    Ok((model, report, warnings))
}

pub struct Run {
    pub kind: ModelKind,
    pub model: Model,
    pub train_report: TrainReport,
    pub report: EvalReport,
    pub scored: Scored,
    pub warnings: Vec<String>,
}

/// Evaluates a trained model on the test split and wraps it as a run.
pub fn finish(
    kind: ModelKind,
    run_id: &str,
    trained: (Model, TrainReport, Vec<String>),
    data: &Datasets,
    slices: &SliceConfig,
) -> Result<Run> {
    let (model, train_report, warnings) = trained;
    let (report, scored) = evaluate(&model, run_id, &data.test, slices)?;
    Ok(Run {
        kind,
        report: report.with_kind(kind).with_train_counts(&data.train, slices),
        model,
        train_report,
        scored,
        warnings,
    })
}

pub struct FourWay {
    /// P, P_UP, S, S_UP in that order.
    pub runs: Vec<Run>,
    pub comparison: Comparison,
}

impl FourWay {
    pub fn run(&self, kind: ModelKind) -> &Run {
        self.runs.iter().find(|r| r.kind == kind).expect("all four kinds present")
    }
}

/// Trains and evaluates P, P_UP, S (on P) and S_UP (on P_UP), then compares
/// everything against P.
pub fn four_way(cfg: &ExperimentConfig, data: &Datasets, bands: VolumeBands) -> Result<FourWay> {
    let slices = cfg.slice_config()?;
    let mut runs: Vec<Run> = [ModelKind::P, ModelKind::PUp]
        .par_iter()
        .map(|&k| finish(k, k.label(), train_kind(cfg, k, data, &slices, None)?, data, &slices))
        .collect::<Result<_>>()?;
    let extended: Vec<Run> = [(ModelKind::S, 0), (ModelKind::SUp, 1)]
        .par_iter()
        .map(|&(k, base)| {
            let bb = runs[base].model.backbone();
            finish(k, k.label(), train_kind(cfg, k, data, &slices, Some(bb))?, data, &slices)
        })
        .collect::<Result<_>>()?;
    runs.extend(extended);
    let reports: Vec<&EvalReport> = runs.iter().map(|r| &r.report).collect();
    let comparison = compare(reports[0], &reports, bands)?;
    Ok(FourWay { runs, comparison })
}

/// Attention settings of the sweep grid.
pub fn sweep_grid() -> Vec<AttentionConfig> {
    let mut v = Vec::new();
    for method in [AttentionMethod::IndicatorOnly, AttentionMethod::IndicatorPlusExpert] {
        for tau in [1.0, 0.1] {
            v.push(AttentionConfig { method, tau });
        }
    }
    v
}

pub fn cell_id(a: &AttentionConfig) -> String {
    format!("S[{},tau={}]", a.method.label(), a.tau)
}

pub struct Sweep {
    pub cells: Vec<(AttentionConfig, Run)>,
    /// Baseline row plus one row per cell.
    pub comparison: Comparison,
}

/// Trains S on `baseline`'s backbone for every attention setting in `grid`.
pub fn sweep(
    cfg: &ExperimentConfig,
    data: &Datasets,
    baseline: &Run,
    grid: &[AttentionConfig],
    bands: VolumeBands,
) -> Result<Sweep> {
    let slices = cfg.slice_config()?;
    let cells: Vec<(AttentionConfig, Run)> = grid
        .par_iter()
        .map(|a| {
            let cell = ExperimentConfig {
                attention: AttentionConfig::new(a.method, a.tau)?,
                ..cfg.clone()
            };
            let trained = train_kind(&cell, ModelKind::S, data, &slices, Some(baseline.model.backbone()))?;
            Ok((*a, finish(ModelKind::S, &cell_id(a), trained, data, &slices)?))
        })
        .collect::<Result<_>>()?;
    let mut reports = vec![&baseline.report];
    reports.extend(cells.iter().map(|(_, r)| &r.report));
    let comparison = compare(&baseline.report, &reports, bands)?;
    Ok(Sweep { cells, comparison })
}
