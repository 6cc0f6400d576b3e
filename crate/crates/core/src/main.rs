use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use skillslice::datagen::{self, read_dataset, TrafficConfig};
use skillslice::harness::experiment::{cell_id, finish, sweep_grid, train_kind};
use skillslice::harness::train::TrainReport;
use skillslice::harness::{
    compare, evaluate, four_way, sweep, Checkpoint, Comparison, Datasets, EvalReport, ExperimentConfig, ModelKind,
    VolumeBands,
};
use skillslice::slicing::SliceConfig;
use skillslice::{Error, Result};

/// Output directory override used when `--out` is absent.
const OUT_ENV: &str = "SKILLSLICE_OUT";

#[derive(Parser)]
#[command(name = "skillslice", version, about = "Slice-aware skill routing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value configuration file; unset keys keep their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides experiment.seed (data.seed for `generate`)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [env: SKILLSLICE_OUT, default: out]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic training file and test file with manifests
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write its checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// P, P_UP, S or S_UP; overrides experiment.model_kind
        #[arg(long)]
        kind: Option<ModelKind>,
        /// Backbone checkpoint for S and S_UP; overrides paths.backbone_checkpoint
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Score a test file with a checkpoint and write its report
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test file; overrides paths.test
        #[arg(long)]
        test: Option<PathBuf>,
        /// Report name; defaults to the checkpoint's model kind
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Tabulate percentage-point deltas of reports against a baseline
    Compare {
        #[command(flatten)]
        common: Common,
        /// Report the others are compared against
        #[arg(long)]
        baseline: PathBuf,
        /// Reports to compare; the baseline row is always included
        reports: Vec<PathBuf>,
        /// Training-count boundary between the low and middle bands
        #[arg(long, default_value_t = VolumeBands::default().low)]
        band_low: usize,
        /// Training-count boundary between the middle and high bands
        #[arg(long, default_value_t = VolumeBands::default().high)]
        band_high: usize,
    },
    /// Train S under each attention method and temperature
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Baseline P checkpoint; trained from scratch when absent
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Train and compare P, P_UP, S and S_UP
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Configured files where set, otherwise freshly synthesized ones.
fn datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let train_file = match &cfg.train_path {
        Some(p) => read_dataset(p)?,
        None => datagen::generate_samples(&cfg.traffic)?,
    };
    let test = match &cfg.test_path {
        Some(p) => read_dataset(p)?,
        None => datagen::generate_samples(&test_traffic(cfg))?,
    };
    let (train, validation) = datagen::split(&train_file, cfg.train_fraction, cfg.seed)?;
    Ok(Datasets {
        train,
        validation,
        test,
    })
}

fn test_traffic(cfg: &ExperimentConfig) -> TrafficConfig {
    TrafficConfig {
        stream: 1,
        num_samples: cfg.test_samples,
        ..cfg.traffic.clone()
    }
}

fn epoch_table(kind: ModelKind, r: &TrainReport) -> String {
    let mut s = format!("{} trained on {} samples, {} steps\n", kind.label(), r.train_samples, r.steps);
    s.push_str("epoch  train_loss  validation_loss\n");
    for e in &r.epochs {
        let mark = if Some(e.epoch) == r.selected_epoch { "  *" } else { "" };
        s.push_str(&format!("{:>5}  {:>10.6}  {:>15.6}{mark}\n", e.epoch, e.train_loss, e.validation_loss));
    }
    s
}

fn save_checkpoint(dir: &Path, name: &str, ckpt: Checkpoint) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.ckpt.json"));
    ckpt.save(&path)?;
    Ok(path)
}

fn save_report(dir: &Path, r: &EvalReport) -> Result<()> {
    r.save(&dir.join(format!("{}.report.json", r.run_id)))?;
    write(&dir.join(format!("{}.report.txt", r.run_id)), &r.table())
}

fn save_comparison(dir: &Path, prefix: &str, c: &Comparison) -> Result<String> {
    let text = format!("{}\n{}", c.summary_table(), c.slice_table());
    write(&dir.join(format!("{prefix}.txt")), &text)?;
    write(&dir.join(format!("{prefix}_summary.csv")), &c.summary_csv())?;
    write(&dir.join(format!("{prefix}_slices.csv")), &c.slices_csv())?;
    Ok(text)
}

fn generate(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.traffic.seed = s;
    }
    let dir = out_dir(common)?;
    for (name, traffic) in [("train", cfg.traffic.clone()), ("test", test_traffic(&cfg))] {
        let m = datagen::generate(&traffic, &dir.join(format!("{name}.jsonl")))?;
        println!("{}", m.path.display());
        println!("  {} samples, sha256 {}", m.sample_count, m.sha256);
    }
    Ok(())
}

fn train(common: &Common, kind: Option<ModelKind>, backbone: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(k) = kind {
        cfg.model_kind = k;
    }
    if backbone.is_some() {
        cfg.backbone_checkpoint = backbone;
    }
    let kind = cfg.model_kind;
    let bb = match (kind.is_slice_aware(), &cfg.backbone_checkpoint) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::Config(format!(
                "{} needs paths.backbone_checkpoint (or --backbone) naming a trained {} checkpoint",
                kind.label(),
                kind.backbone_kind().label()
            )))
        }
        (true, Some(p)) => Some(Checkpoint::load(p)?.to_model()?),
    };
    let dir = out_dir(common)?;
    let data = datasets(&cfg)?;
    let slices = cfg.slice_config()?;
    let (model, report, warnings) = train_kind(&cfg, kind, &data, &slices, bb.as_ref().map(|m| m.backbone()))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let ckpt = Checkpoint::from_model(&model, kind, &cfg.to_text()).with_slices(slices.monitored_intents());
    let path = save_checkpoint(&dir, kind.label(), ckpt)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Json {
        context: "train report".into(),
        source: e,
    })?;
    write(&dir.join(format!("{}.train.json", kind.label())), &(json + "\n"))?;
    print!("{}", epoch_table(kind, &report));
    println!("checkpoint {}", path.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, test: Option<PathBuf>, run_id: Option<String>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if test.is_some() {
        cfg.test_path = test;
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let slices = match &ckpt.slice {
        Some(s) if !s.monitored_intents.is_empty() => SliceConfig::new(s.monitored_intents.clone())?,
        _ => cfg.slice_config()?,
    };
    let test = match &cfg.test_path {
        Some(p) => read_dataset(p)?,
        None => datagen::generate_samples(&test_traffic(&cfg))?,
    };
    let run_id = run_id.unwrap_or_else(|| ckpt.kind.label().to_string());
    let (mut report, _) = evaluate(&model, &run_id, &test, &slices)?;
    report = report.with_kind(ckpt.kind);
    if let Some(p) = &cfg.train_path {
        let (train, _) = datagen::split(&read_dataset(p)?, cfg.train_fraction, cfg.seed)?;
        report = report.with_train_counts(&train, &slices);
    }
    let dir = out_dir(common)?;
    save_report(&dir, &report)?;
    print!("{}", report.table());
    Ok(())
}

fn compare_cmd(common: &Common, baseline: &Path, reports: &[PathBuf], bands: VolumeBands) -> Result<()> {
    load_config(common)?;
    let base = EvalReport::load(baseline)?;
    let mut loaded = vec![base.clone()];
    for p in reports {
        loaded.push(EvalReport::load(p)?);
    }
    let refs: Vec<&EvalReport> = loaded.iter().collect();
    let c = compare(&base, &refs, bands)?;
    let dir = out_dir(common)?;
    print!("{}", save_comparison(&dir, "comparison", &c)?);
    Ok(())
}

fn sweep_cmd(common: &Common, backbone: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let data = datasets(&cfg)?;
    let slices = cfg.slice_config()?;
    let trained = match backbone.or(cfg.backbone_checkpoint.clone()) {
        Some(p) => {
            let m = Checkpoint::load(&p)?.to_model()?;
            let empty = TrainReport {
                epochs: Vec::new(),
                selected_epoch: None,
                steps: 0,
                train_samples: data.train.len(),
                validation_samples: data.validation.len(),
            };
            (m, empty, Vec::new())
        }
        None => train_kind(&cfg, ModelKind::P, &data, &slices, None)?,
    };
    let baseline = finish(ModelKind::P, "P", trained, &data, &slices)?;
    let result = sweep(&cfg, &data, &baseline, &sweep_grid(), VolumeBands::default())?;
    save_report(&dir, &baseline.report)?;
    for (a, run) in &result.cells {
        eprintln!("{}: macro tail {:.2}%", cell_id(a), 100.0 * run.report.macro_tail_ra().unwrap_or(f64::NAN));
        save_report(&dir, &run.report)?;
    }
    print!("{}", save_comparison(&dir, "sweep", &result.comparison)?);
    Ok(())
}

fn experiment(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    let data = datasets(&cfg)?;
    let fw = four_way(&cfg, &data, VolumeBands::default())?;
    let slices = cfg.slice_config()?;
    for run in &fw.runs {
        for w in &run.warnings {
            eprintln!("warning: {}: {w}", run.kind.label());
        }
        let ckpt = Checkpoint::from_model(&run.model, run.kind, &cfg.to_text()).with_slices(slices.monitored_intents());
        save_checkpoint(&dir, run.kind.label(), ckpt)?;
        save_report(&dir, &run.report)?;
    }
    print!("{}", save_comparison(&dir, "comparison", &fw.comparison)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common } => generate(&common),
        Command::Train {
            common,
            kind,
            backbone,
        } => train(&common, kind, backbone),
        Command::Eval {
            common,
            checkpoint,
            test,
            run_id,
        } => eval(&common, &checkpoint, test, run_id),
        Command::Compare {
            common,
            baseline,
            reports,
            band_low,
            band_high,
        } => compare_cmd(
            &common,
            &baseline,
            &reports,
            VolumeBands {
                low: band_low,
                high: band_high,
            },
        ),
        Command::Sweep { common, backbone } => sweep_cmd(&common, backbone),
        Command::Experiment { common } => experiment(&common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
