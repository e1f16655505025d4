//! Persisted experiments: run directories, manifests, resumable sweeps and
//! reports.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! <dataset>/<condition>-lambda<λ>-seed<seed>/manifest.json
//!                                           /results.csv
//!                                           /errors.json
//!                                           /entropy.json   (routed models)
//!                                           /model.ckpt     (optional)
//! <dataset>/<name>_results.csv, <name>_summary.txt, <name>_summary.json
//! <dataset>/lower-bound-seed<seed>/manifest.json
//! ```
//!
//! A run directory whose manifest exists is complete and is skipped on
//! resume.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{RunConfig, DATA_DIR_ENV};
use crate::data::{load_mnist_dir, make_permuted_tasks, make_split_tasks, make_synthetic, mnist_paths, TaskKind, TaskSequence};
use crate::error::{Error, Result};
use crate::metrics::{
    cond_entropy_per_path, mean_final_error, read_results, render_summary, summarize, write_results, ErrorMatrix,
    PathEntropyReport, ResultRow, SummaryRow, TableFormat,
};
use crate::trainer::{
    evaluate, expand_condition, run_continual, train_lower_bound, Architecture, ConditionSpec, LowerBoundOutcome,
    RunCondition, TaskDiagnostics, TrainSettings,
};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const ENTROPY_FILE: &str = "entropy.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub kind: TaskKind,
    pub num_tasks: usize,
    pub train_sizes: Vec<usize>,
    pub val_sizes: Vec<usize>,
    pub test_sizes: Vec<usize>,
    pub data_seed: u64,
}

impl DatasetInfo {
    pub fn of(tasks: &TaskSequence, data_seed: u64) -> Self {
        Self {
            kind: tasks.kind,
            num_tasks: tasks.len(),
            train_sizes: tasks.tasks.iter().map(|t| t.train.len()).collect(),
            val_sizes: tasks.tasks.iter().map(|t| t.val.len()).collect(),
            test_sizes: tasks.tasks.iter().map(|t| t.test.len()).collect(),
            data_seed,
        }
    }
}

/// Per-task summary of training diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: usize,
    pub train_error: f64,
    pub final_class_loss: f64,
    pub final_joint_fisher: f64,
    pub final_reward: f64,
    pub final_epsilon: f64,
    pub routing_agreement: Vec<f64>,
    pub seconds: f64,
}

impl From<&TaskDiagnostics> for TaskSummary {
    fn from(d: &TaskDiagnostics) -> Self {
        Self {
            task_id: d.task_id,
            train_error: d.train_error,
            final_class_loss: d.last_epoch_mean(|r| r.class_loss),
            final_joint_fisher: d.last_epoch_mean(|r| r.joint_fisher),
            final_reward: d.last_epoch_mean(|r| r.reward),
            final_epsilon: d.batches.last().map_or(f64::NAN, |r| r.epsilon),
            routing_agreement: d.routing_agreement.clone(),
            seconds: d.seconds,
        }
    }
}

/// Written last into a run directory; sufficient to reproduce the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub package_version: String,
    pub config: RunConfig,
    pub condition: RunCondition,
    pub trial: usize,
    pub architecture: Architecture,
    pub settings: TrainSettings,
    pub dataset: DatasetInfo,
    pub result: ResultRow,
    pub test_errors: ErrorMatrix,
    pub val_errors: ErrorMatrix,
    pub tasks: Vec<TaskSummary>,
    pub mean_path_entropy: Option<f64>,
    pub total_seconds: f64,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Builds the task sequence described by `cfg`.
pub fn load_tasks(cfg: &RunConfig) -> Result<TaskSequence> {
    let n = cfg.num_tasks();
    match cfg.dataset {
        TaskKind::Synthetic => make_synthetic(
            n,
            cfg.synthetic.samples_per_task,
            cfg.synthetic.input_dim,
            cfg.synthetic.classes,
            cfg.data_seed,
        ),
        kind => {
            let dir = cfg.resolved_data_dir().ok_or_else(|| Error::MissingDataDir {
                env: DATA_DIR_ENV,
                files: mnist_paths(Path::new("<dir>"))
                    .iter()
                    .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join(", "),
            })?;
            let (train, test) = load_mnist_dir(&dir)?;
            if kind == TaskKind::Permuted {
                make_permuted_tasks(&train, &test, n, cfg.data_seed)
            } else {
                Ok(make_split_tasks(&train, &test, cfg.data_seed)?.truncate(n))
            }
        }
    }
}

pub fn condition_slug(label: &str) -> String {
    label.to_ascii_lowercase().replace('+', "-")
}

pub fn run_dir(cfg: &RunConfig, cond: &RunCondition) -> PathBuf {
    cfg.output_dir.join(cfg.dataset.to_string()).join(format!(
        "{}-lambda{}-seed{}",
        condition_slug(&cond.label()),
        cond.lambda_value,
        cond.seed
    ))
}

/// Outcome of one run, fresh or loaded from a previous invocation.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub manifest: RunManifest,
    pub resumed: bool,
}

/// Runs one condition at one lambda and seed, or loads it if its manifest
/// already exists.
pub fn execute_run(cfg: &RunConfig, tasks: &TaskSequence, cond: &RunCondition, trial: usize) -> Result<RunRecord> {
    let dir = run_dir(cfg, cond);
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let manifest: RunManifest = read_json(&manifest_path)?;
        if manifest.condition == *cond
            && manifest.architecture == cfg.architecture()
            && manifest.settings == cfg.settings()
            && manifest.dataset == DatasetInfo::of(tasks, cfg.data_seed)
        {
            info!("skipping completed run {}", dir.display());
            return Ok(RunRecord {
                manifest,
                resumed: true,
            });
        }
        warn!("stale manifest in {} does not match; rerunning", dir.display());
        fs::remove_file(&manifest_path)?;
    }
    fs::create_dir_all(&dir)?;

    let arch = cfg.architecture();
    let settings = cfg.settings();
    let start = Instant::now();
    let outcome = run_continual(cond, tasks, &arch, &settings)?;
    let total_seconds = start.elapsed().as_secs_f64();

    let result = ResultRow {
        condition: cond.label(),
        dataset: tasks.kind.to_string(),
        lambda: cond.lambda_value,
        trial,
        mean_final_error: mean_final_error(&outcome.test_errors)?,
        wall_seconds: if cfg.record_timing { total_seconds } else { 0.0 },
    };

    let entropy = match outcome.learner.as_dib() {
        Some(model) => {
            let report = cond_entropy_per_path(model, tasks)?;
            write_json(&report, &dir.join(ENTROPY_FILE))?;
            Some(report.mean_path_entropy())
        }
        None => None,
    };
    write_json(
        &serde_json::json!({
            "test_errors": outcome.test_errors,
            "val_errors": outcome.val_errors,
        }),
        &dir.join("errors.json"),
    )?;
    write_results(std::slice::from_ref(&result), &dir.join("results.csv"), TableFormat::Csv)?;
    if cfg.save_checkpoints {
        checkpoint::save(
            &Checkpoint {
                condition: cond.clone(),
                architecture: arch.clone(),
                dataset: tasks.kind.to_string(),
                tasks_done: tasks.len(),
                learner: outcome.learner.clone(),
                anchors: outcome.anchors.clone(),
                schedule: outcome.schedule,
            },
            &dir.join(CHECKPOINT_FILE),
        )?;
    }
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        condition: cond.clone(),
        trial,
        architecture: arch,
        settings,
        dataset: DatasetInfo::of(tasks, cfg.data_seed),
        result,
        test_errors: outcome.test_errors,
        val_errors: outcome.val_errors,
        tasks: outcome.diagnostics.iter().map(TaskSummary::from).collect(),
        mean_path_entropy: entropy,
        total_seconds,
    };
    write_json(&manifest, &manifest_path)?;
    info!(
        "{} λ={} seed={}: mean final error {:.2}%",
        cond.label(),
        cond.lambda_value,
        cond.seed,
        manifest.result.mean_final_error
    );
    Ok(RunRecord {
        manifest,
        resumed: false,
    })
}

/// Runs `jobs` on up to `workers` threads; output order matches input order.
fn run_pool<J: Sync, T: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let out = f(&jobs[i]);
                let failed = out.is_err();
                slots.lock().expect("worker panicked")[i] = Some(out);
                if failed {
                    next.store(jobs.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let slots = slots.into_inner().expect("worker panicked");
    slots.into_iter().flatten().collect()
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub records: Vec<RunRecord>,
    pub results_path: PathBuf,
}

/// Expands every condition over lambdas and trials, runs (or resumes) each,
/// and writes the combined table and summary as `<name>_results.csv` etc.
pub fn run_conditions(cfg: &RunConfig, specs: &[ConditionSpec], tasks: &TaskSequence, name: &str) -> Result<SweepOutcome> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for spec in specs {
        for cond in expand_condition(*spec, &cfg.lambdas, cfg.trials, cfg.epochs_per_task(), cfg.seed) {
            let trial = (cond.seed - cfg.seed) as usize;
            jobs.push((cond, trial));
        }
    }
    info!("{} runs across {} conditions", jobs.len(), specs.len());
    let records = run_pool(&jobs, cfg.workers, |(cond, trial)| execute_run(cfg, tasks, cond, *trial))?;
    let rows: Vec<ResultRow> = records.iter().map(|r| r.manifest.result.clone()).collect();
    let summary = summarize(&rows);

    let base = cfg.output_dir.join(cfg.dataset.to_string());
    fs::create_dir_all(&base)?;
    let results_path = base.join(format!("{name}_results.csv"));
    write_results(&rows, &results_path, TableFormat::Csv)?;
    write_results(&rows, &base.join(format!("{name}_results.json")), TableFormat::Json)?;
    fs::write(base.join(format!("{name}_summary.txt")), render_summary(&summary))?;
    write_json(&summary, &base.join(format!("{name}_summary.json")))?;
    Ok(SweepOutcome {
        rows,
        summary,
        records,
        results_path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundManifest {
    pub manifest_version: u32,
    pub config: RunConfig,
    pub architecture: Architecture,
    pub dataset: DatasetInfo,
    pub outcome: LowerBoundOutcome,
    pub total_seconds: f64,
}

/// Joint training over all tasks, once per trial seed.
pub fn run_lower_bound(cfg: &RunConfig, tasks: &TaskSequence) -> Result<Vec<LowerBoundManifest>> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.trials as u64).map(|i| cfg.seed + i).collect();
    let arch = cfg.architecture();
    let settings = cfg.settings();
    run_pool(&seeds, cfg.workers, |&seed| {
        let dir = cfg
            .output_dir
            .join(cfg.dataset.to_string())
            .join(format!("lower-bound-seed{seed}"));
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            return read_json(&path);
        }
        fs::create_dir_all(&dir)?;
        let start = Instant::now();
        let outcome = train_lower_bound(tasks, &arch, &settings, cfg.lower_bound_epochs(), seed)?;
        let manifest = LowerBoundManifest {
            manifest_version: MANIFEST_VERSION,
            config: cfg.clone(),
            architecture: arch.clone(),
            dataset: DatasetInfo::of(tasks, cfg.data_seed),
            outcome,
            total_seconds: start.elapsed().as_secs_f64(),
        };
        write_json(&manifest, &path)?;
        info!("lower bound seed {seed}: {:.2}%", manifest.outcome.mean_error);
        Ok(manifest)
    })
}

/// Evaluation of a stored checkpoint without retraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub condition: String,
    pub final_errors: Vec<f64>,
    pub mean_final_error: f64,
    pub entropy: Option<PathEntropyReport>,
}

/// Recomputes final-row test errors and, for routed models, the per-path
/// entropy report from a run directory's checkpoint. The report is written
/// next to the checkpoint.
pub fn report_checkpoint(run_dir: &Path, data_dir: Option<&Path>) -> Result<CheckpointReport> {
    let manifest: RunManifest = read_json(&run_dir.join(MANIFEST_FILE))?;
    let ckpt = checkpoint::load(&run_dir.join(CHECKPOINT_FILE))?;
    let mut cfg = manifest.config.clone();
    if let Some(d) = data_dir {
        cfg.data_dir = Some(d.to_path_buf());
    }
    let tasks = load_tasks(&cfg)?;
    let settings = manifest.settings.clone();
    let final_errors = tasks
        .tasks
        .iter()
        .take(ckpt.tasks_done)
        .enumerate()
        .map(|(t, task)| evaluate(&ckpt.learner, &task.test, t, settings.eval_batch))
        .collect::<Result<Vec<f64>>>()?;
    let entropy = match ckpt.learner.as_dib() {
        Some(m) => Some(cond_entropy_per_path(m, &tasks)?),
        None => None,
    };
    if let Some(e) = &entropy {
        write_json(e, &run_dir.join(ENTROPY_FILE))?;
    }
    let report = CheckpointReport {
        condition: ckpt.condition.label(),
        mean_final_error: final_errors.iter().sum::<f64>() / final_errors.len() as f64,
        final_errors,
        entropy,
    };
    write_json(&report, &run_dir.join("report.json"))?;
    Ok(report)
}

/// Renders the summary of a results table (CSV or JSON).
pub fn report_table(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let rows = read_results(path, TableFormat::from_path(path))?;
    Ok(render_summary(&summarize(&rows)))
}
