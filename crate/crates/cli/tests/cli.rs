use std::path::Path;

use clap::Parser;
use dib_cli::{main_with_args, parse_config, Cli, CliError, Command, ConfigArgs, EXIT_DATA_MISSING, EXIT_OK, EXIT_USAGE};
use dib_core::data::TaskKind;
use dib_core::learner::ModelKind;
use dib_core::trainer::DEFAULT_LAMBDAS;

fn config_args(argv: &[&str]) -> ConfigArgs {
    let mut full = vec!["dib"];
    full.extend_from_slice(argv);
    match Cli::try_parse_from(full).unwrap().command {
        Command::Run(a) | Command::Sweep(a) | Command::LowerBound(a) => a,
        other => panic!("unexpected command {other:?}"),
    }
}

fn synthetic_argv<'a>(sub: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "dib", sub, "--dataset", "synthetic", "--desk-scale", "--epochs", "1", "--trials", "1",
        "--num-tasks", "2", "--lambdas", "100", "--no-timing", "--output-dir", out,
    ]
}

#[test]
fn run_flags_resolve_to_config() {
    let args = config_args(&[
        "run", "--dataset", "split", "--model", "dib", "--ewc", "--lambdas", "1,10,100,1000,10000",
        "--data-dir", "/nonexistent",
    ]);
    let cfg = parse_config(&args, None).unwrap();
    assert_eq!(cfg.dataset, TaskKind::Split);
    assert_eq!(cfg.model, ModelKind::Dib);
    assert!(cfg.ewc);
    assert_eq!(cfg.lambdas, DEFAULT_LAMBDAS.to_vec());
    assert_eq!(cfg.num_tasks(), 5);
}

#[test]
fn flags_override_config_file() {
    let args = config_args(&["run", "--dataset", "synthetic", "--trials", "7"]);
    let cfg = parse_config(&args, Some("trials = 2\nbatch_size = 64\nmodel = \"mhmlp\"")).unwrap();
    assert_eq!(cfg.trials, 7);
    assert_eq!(cfg.batch_size, 64);
    assert_eq!(cfg.model, ModelKind::Mhmlp);
}

#[test]
fn unknown_config_key_is_usage_error() {
    let args = config_args(&["run", "--dataset", "synthetic"]);
    let err = parse_config(&args, Some("learning_rte = 0.1")).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)));
    assert_eq!(err.exit_code(), EXIT_USAGE);
}

#[test]
fn invalid_values_are_usage_errors() {
    assert_ne!(main_with_args(["dib"]), EXIT_OK);
    assert_eq!(main_with_args(["dib", "run", "--dataset", "cifar"]), EXIT_USAGE);
    assert_eq!(main_with_args(["dib", "run", "--bogus"]), EXIT_USAGE);
    assert_eq!(main_with_args(["dib", "run", "--dataset", "synthetic", "--batch-size", "0"]), EXIT_USAGE);
    assert_eq!(main_with_args(["dib", "run", "--dataset", "synthetic", "--lambdas=-1"]), EXIT_USAGE);
    assert_eq!(main_with_args(["dib", "--help"]), EXIT_OK);
}

#[test]
fn missing_data_dir_exit_code() {
    if std::env::var_os(dib_core::config::DATA_DIR_ENV).is_some() {
        return;
    }
    let args = config_args(&["run", "--dataset", "permuted"]);
    let err = parse_config(&args, None).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_DATA_MISSING);
    let empty = tempfile::tempdir().unwrap();
    let dir = empty.path().to_str().unwrap();
    let out = empty.path().join("runs");
    assert_eq!(
        main_with_args(["dib", "run", "--dataset", "split", "--data-dir", dir, "--output-dir", out.to_str().unwrap()]),
        EXIT_DATA_MISSING
    );
}

fn manifest_mtimes(root: &Path) -> Vec<std::time::SystemTime> {
    let mut out = Vec::new();
    for entry in walk(root) {
        if entry.file_name().and_then(|n| n.to_str()) == Some("manifest.json") {
            out.push(std::fs::metadata(&entry).unwrap().modified().unwrap());
        }
    }
    out.sort();
    out
}

fn walk(root: &Path) -> Vec<std::path::PathBuf> {
    let mut stack = vec![root.to_path_buf()];
    let mut files = Vec::new();
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files
}

#[test]
fn synthetic_sweep_resumes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap().to_string();
    let mut argv = synthetic_argv("sweep", &out);
    argv.extend(["--conditions", "mlp,dib+ewc"]);
    assert_eq!(main_with_args(argv.clone()), EXIT_OK);
    let table = tmp.path().join("synthetic").join("sweep_results.csv");
    let first = std::fs::read(&table).unwrap();
    let before = manifest_mtimes(tmp.path());
    assert_eq!(before.len(), 2);

    assert_eq!(main_with_args(argv), EXIT_OK);
    assert_eq!(std::fs::read(&table).unwrap(), first);
    assert_eq!(manifest_mtimes(tmp.path()), before);

    assert_eq!(main_with_args(["dib", "report", table.to_str().unwrap()]), EXIT_OK);
    let run_dir = tmp.path().join("synthetic").join("dib-ewc-lambda100-seed0");
    assert!(run_dir.join("model.ckpt").exists(), "{}", run_dir.display());
    assert_eq!(main_with_args(["dib", "report", run_dir.to_str().unwrap()]), EXIT_OK);
    assert!(run_dir.join("report.json").exists());
}

#[test]
fn run_and_lower_bound_on_synthetic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap().to_string();
    let mut argv = synthetic_argv("run", &out);
    argv.extend(["--model", "rir", "--ewc"]);
    assert_eq!(main_with_args(argv), EXIT_OK);
    assert_eq!(main_with_args(synthetic_argv("lower-bound", &out)), EXIT_OK);
}

#[test]
fn report_on_missing_path_fails() {
    assert_ne!(main_with_args(["dib", "report", "/nonexistent/results.csv"]), EXIT_OK);
}

#[test]
fn verify_passes() {
    assert_eq!(main_with_args(["dib", "verify"]), EXIT_OK);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let args = config_args(&["sweep", "--data-dir", "/nonexistent"]);
        let cfg = parse_config(&args, Some(&text)).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(cfg.dataset, TaskKind::Split);
    }
}
