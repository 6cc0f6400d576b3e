use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough for a test run
data.train_samples = 800
data.test_samples = 300
train.epochs = 1
train.batch_size = 64
model.d = 8
model.lstm_hidden = 4
model.token_dim = 4
model.categorical_dim = 4
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_skillslice"));
    c.env_remove("SKILLSLICE_OUT");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    let out = bin().args(args).current_dir(dir).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let with_paths = format!("{TINY}paths.train = data/train.jsonl\npaths.test = data/test.jsonl\n");
    std::fs::write(dir.path().join("exp.cfg"), with_paths).unwrap();
    run(&["generate", "--config", "tiny.cfg", "--out", "data"], dir.path());
    dir
}

#[test]
fn usage_errors_exit_nonzero() {
    for args in [&["frobnicate"][..], &["eval", "--bogus"], &["train", "--kind", "Q"], &[]] {
        let out = bin().args(args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("Usage") || err.contains("--help"), "{args:?}: {err}");
    }
}

#[test]
fn runtime_errors_exit_nonzero_with_a_diagnostic() {
    let dir = setup();
    let out = bin()
        .args(["train", "--config", "exp.cfg", "--kind", "S", "--out", "m"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("backbone"));

    let out = bin()
        .args(["eval", "--checkpoint", "missing.json"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn generate_is_reproducible() {
    let dir = setup();
    run(&["generate", "--config", "tiny.cfg", "--out", "again"], dir.path());
    let p = dir.path();
    for f in ["train.jsonl", "test.jsonl"] {
        assert_eq!(
            std::fs::read(p.join("data").join(f)).unwrap(),
            std::fs::read(p.join("again").join(f)).unwrap()
        );
    }
    run(&["generate", "--config", "tiny.cfg", "--seed", "99", "--out", "other"], dir.path());
    assert_ne!(
        std::fs::read(p.join("data/train.jsonl")).unwrap(),
        std::fs::read(p.join("other/train.jsonl")).unwrap()
    );
}

#[test]
fn train_eval_compare_pipeline() {
    let dir = setup();
    let p = dir.path();
    run(&["train", "--config", "exp.cfg", "--kind", "P", "--out", "m"], p);
    run(
        &["train", "--config", "exp.cfg", "--kind", "S", "--backbone", "m/P.ckpt.json", "--out", "m"],
        p,
    );
    for (ckpt, out) in [("m/P.ckpt.json", "e1"), ("m/P.ckpt.json", "e2"), ("m/S.ckpt.json", "e1")] {
        run(&["eval", "--config", "exp.cfg", "--checkpoint", ckpt, "--out", out], p);
    }
    assert_eq!(
        std::fs::read(p.join("e1/P.report.json")).unwrap(),
        std::fs::read(p.join("e2/P.report.json")).unwrap()
    );

    let out = run(&["compare", "--baseline", "e1/P.report.json", "e1/P.report.json", "--out", "c"], p);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("+0.00"));
    let csv = std::fs::read_to_string(p.join("c/comparison_summary.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!((cells[2], cells[4], cells[5]), ("0.00", "0.00", "0"), "{line}");
    }

    run(&["compare", "--baseline", "e1/P.report.json", "e1/S.report.json", "--out", "c"], p);
    let summary = std::fs::read_to_string(p.join("c/comparison_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn output_directory_from_environment() {
    let dir = setup();
    let status = bin()
        .args(["generate", "--config", "tiny.cfg"])
        .env("SKILLSLICE_OUT", "from_env")
        .current_dir(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("from_env/train.jsonl").exists());
}

#[test]
fn sweep_writes_five_rows() {
    let dir = setup();
    run(&["sweep", "--config", "exp.cfg", "--out", "s"], dir.path());
    let csv = std::fs::read_to_string(dir.path().join("s/sweep_summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6, "{csv}");
}
