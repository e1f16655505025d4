//! Task-sequential training: the three-loss routed update, the baselines,
//! EWC anchoring between tasks, evaluation and the joint-training bound.

use std::time::Instant;

use log::{debug, error, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{build_mhmlp_baseline, build_mlp_baseline, FULL_MLP_HIDDEN};
use crate::data::{batch_iter, LabeledSet, Task, TaskKind, TaskSequence};
use crate::error::{Error, Result};
use crate::information::{
    empirical_fisher_diag, ewc_penalty_and_grads, joint_fisher_from_grads, reward, FisherAnchor,
    RewardScale,
};
use crate::learner::{Learner, ModelKind};
use crate::metrics::ErrorMatrix;
use crate::model::{DibConfig, DibModel, RoutingMode};
use crate::nn::{adam_step, softmax_xent, AdamConfig, Mlp};
use crate::routing::{greedy_actions, EpsilonSchedule};
use crate::tensor::Tensor2D;

/// Hyperparameter values swept for any condition using routing rewards or EWC.
pub const DEFAULT_LAMBDAS: [f64; 5] = [1.0, 10.0, 100.0, 1000.0, 10000.0];

/// Layer widths and counts for every model family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub num_cells: usize,
    pub modules_per_cell: usize,
    pub module_width: usize,
    pub module_layers: usize,
    pub router_hidden: Vec<usize>,
    pub memnet_hidden: Vec<usize>,
    pub mlp_hidden: usize,
}

impl Architecture {
    pub fn full() -> Self {
        Self {
            num_cells: 2,
            modules_per_cell: 10,
            module_width: 445,
            module_layers: 2,
            router_hidden: vec![256, 256],
            memnet_hidden: vec![128, 128],
            mlp_hidden: FULL_MLP_HIDDEN,
        }
    }

    /// Reduced widths. The baseline hidden width is chosen so its parameter
    /// count tracks the routed model's modules, routers and one MemNet set.
    pub fn desk() -> Self {
        Self {
            num_cells: 2,
            modules_per_cell: 10,
            module_width: 64,
            module_layers: 2,
            router_hidden: vec![64, 64],
            memnet_hidden: vec![32, 32],
            mlp_hidden: 500,
        }
    }

    pub fn dib_config(&self, input_dim: usize, output_dim: usize) -> DibConfig {
        DibConfig {
            num_cells: self.num_cells,
            modules_per_cell: self.modules_per_cell,
            module_width: self.module_width,
            module_layers: self.module_layers,
            router_hidden: self.router_hidden.clone(),
            memnet_hidden: self.memnet_hidden.clone(),
            input_dim,
            output_dim,
        }
    }
}

/// Optimisation settings shared by every condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Upper bound on samples used for each empirical Fisher estimate.
    pub fisher_samples: usize,
    pub schedule: EpsilonSchedule,
    pub eval_batch: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 128,
            adam: AdamConfig::default(),
            fisher_samples: 1024,
            schedule: EpsilonSchedule::default(),
            eval_batch: 1000,
        }
    }
}

/// One experimental condition at one hyperparameter value and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCondition {
    pub model_kind: ModelKind,
    pub ewc: bool,
    /// EWC strength and reward scale (the same value when both apply).
    pub lambda_value: f64,
    pub epochs_per_task: usize,
    pub trials: usize,
    pub seed: u64,
}

impl RunCondition {
    /// Table label such as `DIB+EWC`.
    pub fn label(&self) -> String {
        condition_label(self.model_kind, self.ewc)
    }

    /// Whether the run depends on the swept hyperparameter.
    pub fn uses_lambda(&self) -> bool {
        self.ewc || self.model_kind == ModelKind::Dib
    }
}

pub fn condition_label(kind: ModelKind, ewc: bool) -> String {
    if ewc {
        format!("{}+EWC", kind.label())
    } else {
        kind.label().to_string()
    }
}

/// Per-batch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub class_loss: f64,
    pub ewc_loss: f64,
    pub memnet_loss: f64,
    pub router_loss: f64,
    pub joint_fisher: f64,
    pub reward: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskDiagnostics {
    pub task_id: usize,
    pub batches: Vec<BatchRecord>,
    /// Fraction of training samples where MemNet and greedy router agree,
    /// per cell (routed models with learned routing only).
    pub routing_agreement: Vec<f64>,
    pub train_error: f64,
    pub seconds: f64,
}

impl TaskDiagnostics {
    /// Mean of a batch-record field over the last epoch.
    pub fn last_epoch_mean(&self, f: impl Fn(&BatchRecord) -> f64) -> f64 {
        let Some(last) = self.batches.last().map(|b| b.epoch) else {
            return f64::NAN;
        };
        let vals: Vec<f64> = self.batches.iter().filter(|b| b.epoch == last).map(f).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

pub fn build_learner(
    kind: ModelKind,
    arch: &Architecture,
    input_dim: usize,
    output_dim: usize,
    rng: &mut impl Rng,
) -> Result<Learner> {
    Ok(match kind {
        ModelKind::Mlp => Learner::Mlp(build_mlp_baseline(input_dim, output_dim, arch.mlp_hidden, rng)?),
        ModelKind::Mhmlp => {
            Learner::MultiHead(build_mhmlp_baseline(input_dim, output_dim, arch.mlp_hidden, rng)?)
        }
        ModelKind::Dib | ModelKind::Rir => {
            let routing = if kind == ModelKind::Rir {
                RoutingMode::Random
            } else {
                RoutingMode::Learned
            };
            Learner::Dib(DibModel::new(arch.dib_config(input_dim, output_dim), routing, rng)?)
        }
    })
}

fn step_group<'a>(banks: impl Iterator<Item = &'a mut crate::nn::ParamBank>, adam: &AdamConfig) {
    for bank in banks {
        adam_step(bank, adam);
        bank.zero_grads();
    }
}

fn ewc_term(learner: &mut Learner, condition: &RunCondition, anchors: &[FisherAnchor]) -> Result<f64> {
    if !condition.ewc || anchors.is_empty() {
        return Ok(0.0);
    }
    let mut banks = learner.regularized_banks_mut();
    ewc_penalty_and_grads(&mut banks, anchors, condition.lambda_value)
}

fn mlp_batch(
    net: &mut Mlp,
    x: &Tensor2D,
    y: &[usize],
) -> Result<f64> {
    let (logits, cache) = net.forward_cached(x)?;
    let out = softmax_xent(&logits, y)?;
    let (grads, _) = net.backward(&cache, &out.dlogits, false)?;
    net.accumulate(&grads)?;
    Ok(out.loss)
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    learner: &mut Learner,
    x: &Tensor2D,
    y: &[usize],
    task_id: usize,
    condition: &RunCondition,
    settings: &TrainSettings,
    anchors: &[FisherAnchor],
    schedule: &mut EpsilonSchedule,
    rng: &mut impl Rng,
) -> Result<BatchRecord> {
    let adam = &settings.adam;
    let mut rec = BatchRecord {
        epoch: 0,
        batch: 0,
        class_loss: 0.0,
        ewc_loss: 0.0,
        memnet_loss: 0.0,
        router_loss: 0.0,
        joint_fisher: 0.0,
        reward: 0.0,
        epsilon: schedule.current(),
    };
    match learner {
        Learner::Mlp(net) => {
            rec.class_loss = mlp_batch(net, x, y)?;
        }
        Learner::MultiHead(mh) => {
            let (h, trunk_cache) = mh.trunk.forward_cached(x)?;
            let head = mh.head_mut(task_id)?;
            let (logits, head_cache) = head.forward_cached(&h)?;
            let out = softmax_xent(&logits, y)?;
            let (head_grads, dh) = head.backward(&head_cache, &out.dlogits, true)?;
            head.accumulate(&head_grads)?;
            let (trunk_grads, _) = mh.trunk.backward(&trunk_cache, &dh.expect("requested"), false)?;
            mh.trunk.accumulate(&trunk_grads)?;
            rec.class_loss = out.loss;
        }
        Learner::Dib(model) => {
            let trace = model.forward_train(x, rec.epsilon, rng, task_id)?;
            let out = softmax_xent(&trace.class_logits, y)?;
            let grads = model.backward_classification(&trace, &out.dlogits)?;
            rec.class_loss = out.loss;
            rec.joint_fisher = joint_fisher_from_grads(&grads, y.len() as f64)?;
            rec.reward = reward(
                rec.joint_fisher,
                RewardScale {
                    lambda_reward: condition.lambda_value,
                },
            );
            rec.memnet_loss = model.memnet_loss_and_grads(&trace)?.iter().sum();
            rec.router_loss = model.router_loss_and_grads(&trace, rec.reward)?.iter().sum();
        }
    }

    rec.ewc_loss = ewc_term(learner, condition, anchors)?;

    match learner {
        Learner::Mlp(net) => step_group(std::iter::once(&mut net.bank), adam),
        Learner::MultiHead(mh) => {
            step_group(std::iter::once(&mut mh.trunk.bank), adam);
            step_group(std::iter::once(&mut mh.head_mut(task_id)?.bank), adam);
        }
        Learner::Dib(model) => {
            step_group(model.module_banks_mut(), adam);
            if model.routing == RoutingMode::Learned {
                step_group(model.router_banks_mut(), adam);
            }
            step_group(model.memnet_banks_mut(task_id), adam);
        }
    }
    schedule.advance();
    Ok(rec)
}

/// Trains `learner` on one task for `condition.epochs_per_task` epochs.
/// The learner must already be prepared for `task_id` (see
/// [`Learner::start_task`]).
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    learner: &mut Learner,
    task: &Task,
    task_id: usize,
    condition: &RunCondition,
    settings: &TrainSettings,
    anchors: &[FisherAnchor],
    schedule: &mut EpsilonSchedule,
    rng: &mut impl Rng,
) -> Result<TaskDiagnostics> {
    if let Learner::Dib(m) = learner {
        if !m.has_task(task_id) {
            return Err(Error::MissingMemNet(task_id));
        }
    }
    let start = Instant::now();
    let mut diag = TaskDiagnostics {
        task_id,
        ..Default::default()
    };
    for epoch in 0..condition.epochs_per_task {
        let shuffle_seed: u64 = rng.gen();
        for (b, (x, y)) in batch_iter(&task.train, settings.batch_size, shuffle_seed)?.enumerate() {
            let mut rec = train_batch(learner, &x, &y, task_id, condition, settings, anchors, schedule, rng)?;
            rec.epoch = epoch;
            rec.batch = b;
            let total = rec.class_loss + rec.ewc_loss + rec.memnet_loss + rec.router_loss;
            if !total.is_finite() {
                error!(
                    "{}: non-finite loss at task {task_id} epoch {epoch} batch {b}: {rec:?}",
                    condition.label()
                );
                return Err(Error::NonFinite {
                    task: task_id,
                    epoch,
                    batch: b,
                });
            }
            diag.batches.push(rec);
        }
        debug!(
            "{} task {task_id} epoch {epoch}: loss {:.4}",
            condition.label(),
            diag.last_epoch_mean(|r| r.class_loss)
        );
    }
    diag.train_error = evaluate(learner, &task.train, task_id, settings.eval_batch)?;
    if let Learner::Dib(m) = learner {
        if m.routing == RoutingMode::Learned {
            diag.routing_agreement = routing_agreement(m, &task.train, task_id)?;
        }
    }
    diag.seconds = start.elapsed().as_secs_f64();
    Ok(diag)
}

/// Per cell, the fraction of samples whose MemNet choice equals the router's
/// greedy choice (routers fed along their own greedy path).
pub fn routing_agreement(model: &DibModel, set: &LabeledSet, task_id: usize) -> Result<Vec<f64>> {
    let memnet_actions = model.route_infer(&set.inputs, task_id)?;
    let mut h = set.inputs.clone();
    let mut out = Vec::with_capacity(model.cells.len());
    for (c, cell) in model.cells.iter().enumerate() {
        let router_actions = greedy_actions(&cell.router.forward(&h)?);
        let agree = router_actions
            .iter()
            .zip(&memnet_actions[c])
            .filter(|(a, b)| a == b)
            .count();
        out.push(agree as f64 / set.len() as f64);
        h = crate::model::pooled_module_apply(&cell.modules, &h, &router_actions)?;
    }
    Ok(out)
}

/// Percentage of misclassified samples, predicting with task `task_id`'s
/// inference path.
pub fn evaluate(learner: &Learner, set: &LabeledSet, task_id: usize, eval_batch: usize) -> Result<f64> {
    let mut wrong = 0usize;
    let mut start = 0;
    while start < set.len() {
        let end = (start + eval_batch.max(1)).min(set.len());
        let idx: Vec<usize> = (start..end).collect();
        let logits = learner.predict(&set.inputs.gather_rows(&idx), task_id)?;
        wrong += idx
            .iter()
            .enumerate()
            .filter(|(r, &i)| logits.argmax_row(*r) != set.labels[i])
            .count();
        start = end;
    }
    Ok(100.0 * wrong as f64 / set.len() as f64)
}

/// Everything produced by one sequential run.
#[derive(Clone, Debug)]
pub struct ContinualOutcome {
    pub condition: RunCondition,
    pub test_errors: ErrorMatrix,
    pub val_errors: ErrorMatrix,
    pub learner: Learner,
    pub anchors: Vec<FisherAnchor>,
    pub schedule: EpsilonSchedule,
    pub diagnostics: Vec<TaskDiagnostics>,
}

fn fisher_subset(set: &LabeledSet, budget: usize, rng: &mut impl Rng) -> Result<LabeledSet> {
    let n = budget.min(set.len());
    let mut idx: Vec<usize> = (0..set.len()).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
    idx.truncate(n);
    set.subset(&idx)
}

/// Trains on the tasks in order. After each task the learner is evaluated on
/// every task seen so far and, for EWC conditions, a Fisher anchor is added.
pub fn run_continual(
    condition: &RunCondition,
    tasks: &TaskSequence,
    arch: &Architecture,
    settings: &TrainSettings,
) -> Result<ContinualOutcome> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to train on".into()));
    }
    settings.adam.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(condition.seed);
    let mut learner = build_learner(
        condition.model_kind,
        arch,
        tasks.input_dim(),
        tasks.num_classes(),
        &mut rng,
    )?;
    let mut schedule = settings.schedule;
    schedule.step = 0;
    let mut anchors = Vec::new();
    let mut test_errors = ErrorMatrix::default();
    let mut val_errors = ErrorMatrix::default();
    let mut diagnostics = Vec::with_capacity(tasks.len());

    for (i, task) in tasks.tasks.iter().enumerate() {
        learner.start_task(i, &mut rng)?;
        let diag = train_task(
            &mut learner,
            task,
            i,
            condition,
            settings,
            &anchors,
            &mut schedule,
            &mut rng,
        )?;
        let mut test_row = Vec::with_capacity(i + 1);
        let mut val_row = Vec::with_capacity(i + 1);
        for (j, seen) in tasks.tasks.iter().enumerate().take(i + 1) {
            test_row.push(evaluate(&learner, &seen.test, j, settings.eval_batch)?);
            val_row.push(evaluate(&learner, &seen.val, j, settings.eval_batch)?);
        }
        info!(
            "{} λ={} seed={} task {i}: train err {:.2}%, test row {:?} ({:.1}s)",
            condition.label(),
            condition.lambda_value,
            condition.seed,
            diag.train_error,
            test_row.iter().map(|e| (e * 100.0).round() / 100.0).collect::<Vec<_>>(),
            diag.seconds
        );
        test_errors.push_row(test_row)?;
        val_errors.push_row(val_row)?;
        diagnostics.push(diag);
        if condition.ewc {
            let subset = fisher_subset(&task.train, settings.fisher_samples, &mut rng)?;
            anchors.push(empirical_fisher_diag(&learner, &subset, subset.len(), i)?);
        }
    }
    Ok(ContinualOutcome {
        condition: condition.clone(),
        test_errors,
        val_errors,
        learner,
        anchors,
        schedule,
        diagnostics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundOutcome {
    pub per_task_error: Vec<f64>,
    pub mean_error: f64,
    pub epochs: usize,
    pub seed: u64,
}

/// Whether tasks share one label space (permuted inputs) or need their own
/// slice of a joint output layer.
fn shares_label_space(kind: TaskKind) -> bool {
    kind == TaskKind::Permuted
}

/// A plain MLP trained on the union of all tasks. For label-disjoint task
/// families the output layer spans every (task, label) pair and prediction
/// for a task is restricted to its slice.
pub fn train_lower_bound(
    tasks: &TaskSequence,
    arch: &Architecture,
    settings: &TrainSettings,
    epochs: usize,
    seed: u64,
) -> Result<LowerBoundOutcome> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to train on".into()));
    }
    let classes = tasks.num_classes();
    let shared = shares_label_space(tasks.kind);
    let out_dim = if shared { classes } else { classes * tasks.len() };
    let offset = |t: usize| if shared { 0 } else { t * classes };

    let total: usize = tasks.tasks.iter().map(|t| t.train.len()).sum();
    let dim = tasks.input_dim();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (t, task) in tasks.tasks.iter().enumerate() {
        data.extend_from_slice(task.train.inputs.data());
        labels.extend(task.train.labels.iter().map(|&l| l + offset(t)));
    }
    let union = LabeledSet::new(Tensor2D::new(total, dim, data)?, labels, out_dim)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = build_mlp_baseline(dim, out_dim, arch.mlp_hidden, &mut rng)?;
    for epoch in 0..epochs {
        let shuffle_seed: u64 = rng.gen();
        for (b, (x, y)) in batch_iter(&union, settings.batch_size, shuffle_seed)?.enumerate() {
            let loss = mlp_batch(&mut net, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    task: 0,
                    epoch,
                    batch: b,
                });
            }
            adam_step(&mut net.bank, &settings.adam);
            net.bank.zero_grads();
        }
        debug!("lower bound epoch {epoch} done");
    }

    let mut per_task_error = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.tasks.iter().enumerate() {
        let logits = net.forward(&task.test.inputs)?;
        let lo = offset(t);
        let wrong = (0..task.test.len())
            .filter(|&r| {
                let slice = &logits.row(r)[lo..lo + classes];
                crate::tensor::argmax(slice) != task.test.labels[r]
            })
            .count();
        per_task_error.push(100.0 * wrong as f64 / task.test.len() as f64);
    }
    let mean_error = per_task_error.iter().sum::<f64>() / per_task_error.len() as f64;
    Ok(LowerBoundOutcome {
        per_task_error,
        mean_error,
        epochs,
        seed,
    })
}

/// A condition before hyperparameter and trial expansion.
/// Serialized as its label, e.g. `"DIB+EWC"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConditionSpec {
    pub model_kind: ModelKind,
    pub ewc: bool,
}

impl ConditionSpec {
    pub fn label(&self) -> String {
        condition_label(self.model_kind, self.ewc)
    }

    pub fn uses_lambda(&self) -> bool {
        self.ewc || self.model_kind == ModelKind::Dib
    }

    /// The six sequential conditions of the main comparison, plus random
    /// routing with EWC.
    pub fn all() -> Vec<ConditionSpec> {
        use ModelKind::*;
        vec![
            ConditionSpec { model_kind: Mlp, ewc: false },
            ConditionSpec { model_kind: Mlp, ewc: true },
            ConditionSpec { model_kind: Mhmlp, ewc: false },
            ConditionSpec { model_kind: Mhmlp, ewc: true },
            ConditionSpec { model_kind: Rir, ewc: true },
            ConditionSpec { model_kind: Dib, ewc: false },
            ConditionSpec { model_kind: Dib, ewc: true },
        ]
    }
}

impl std::str::FromStr for ConditionSpec {
    type Err = String;

    /// Parses labels such as `mlp`, `dib+ewc` or `RIR+EWC`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let (kind, ewc) = match lower.strip_suffix("+ewc") {
            Some(k) => (k, true),
            None => (lower.as_str(), false),
        };
        Ok(ConditionSpec {
            model_kind: kind.parse()?,
            ewc,
        })
    }
}

impl TryFrom<String> for ConditionSpec {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ConditionSpec> for String {
    fn from(c: ConditionSpec) -> Self {
        c.label()
    }
}

/// Expands a condition into concrete runs: every lambda (when it matters)
/// times every trial. Trial `i` always uses seed `base_seed + i`.
pub fn expand_condition(
    spec: ConditionSpec,
    lambdas: &[f64],
    trials: usize,
    epochs_per_task: usize,
    base_seed: u64,
) -> Vec<RunCondition> {
    let lambda_values: Vec<f64> = if spec.uses_lambda() {
        lambdas.to_vec()
    } else {
        vec![0.0]
    };
    let mut out = Vec::new();
    for &lambda_value in &lambda_values {
        for trial in 0..trials {
            out.push(RunCondition {
                model_kind: spec.model_kind,
                ewc: spec.ewc,
                lambda_value,
                epochs_per_task,
                trials,
                seed: base_seed + trial as u64,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;

    fn tiny_arch() -> Architecture {
        Architecture {
            num_cells: 2,
            modules_per_cell: 3,
            module_width: 8,
            module_layers: 2,
            router_hidden: vec![8],
            memnet_hidden: vec![8],
            mlp_hidden: 12,
        }
    }

    fn cond(kind: ModelKind, ewc: bool) -> RunCondition {
        RunCondition {
            model_kind: kind,
            ewc,
            lambda_value: 10.0,
            epochs_per_task: 2,
            trials: 1,
            seed: 3,
        }
    }

    fn settings() -> TrainSettings {
        TrainSettings {
            batch_size: 16,
            fisher_samples: 32,
            ..Default::default()
        }
    }

    #[test]
    fn expand_counts() {
        let plain = ConditionSpec { model_kind: ModelKind::Mlp, ewc: false };
        assert_eq!(expand_condition(plain, &DEFAULT_LAMBDAS, 3, 20, 0).len(), 3);
        let dib = ConditionSpec { model_kind: ModelKind::Dib, ewc: true };
        let runs = expand_condition(dib, &DEFAULT_LAMBDAS, 3, 20, 7);
        assert_eq!(runs.len(), 15);
        assert_eq!(runs[4].seed, 8);
        let rir = ConditionSpec { model_kind: ModelKind::Rir, ewc: false };
        assert_eq!(expand_condition(rir, &DEFAULT_LAMBDAS, 2, 20, 0).len(), 2);
    }

    #[test]
    fn condition_labels_parse() {
        for spec in ConditionSpec::all() {
            assert_eq!(spec.label().parse::<ConditionSpec>().unwrap(), spec);
        }
        assert!("dib+l2".parse::<ConditionSpec>().is_err());
    }

    #[test]
    fn single_task_matrix_is_one_by_one() {
        let tasks = make_synthetic(1, 64, 6, 2, 1).unwrap();
        let out = run_continual(&cond(ModelKind::Mlp, false), &tasks, &tiny_arch(), &settings()).unwrap();
        assert_eq!(out.test_errors.rows.len(), 1);
        assert_eq!(out.test_errors.rows[0].len(), 1);
    }

    #[test]
    fn ewc_without_anchors_matches_plain() {
        let tasks = make_synthetic(1, 64, 6, 2, 2).unwrap();
        for kind in [ModelKind::Mlp, ModelKind::Mhmlp, ModelKind::Dib] {
            let a = run_continual(&cond(kind, false), &tasks, &tiny_arch(), &settings()).unwrap();
            let b = run_continual(&cond(kind, true), &tasks, &tiny_arch(), &settings()).unwrap();
            assert_eq!(a.learner, b.learner, "{kind}");
            assert_eq!(a.test_errors, b.test_errors);
            assert_eq!(b.anchors.len(), 1);
        }
    }

    #[test]
    fn anchor_count_tracks_tasks() {
        let tasks = make_synthetic(3, 48, 6, 2, 4).unwrap();
        let out = run_continual(&cond(ModelKind::Dib, true), &tasks, &tiny_arch(), &settings()).unwrap();
        assert_eq!(out.anchors.len(), 3);
        assert_eq!(out.test_errors.rows.len(), 3);
        assert!(out.test_errors.rows.iter().flatten().all(|e| (0.0..=100.0).contains(e)));
        assert_eq!(out.schedule.step as usize, out.diagnostics.iter().map(|d| d.batches.len()).sum::<usize>());
    }

    #[test]
    fn runs_are_reproducible() {
        let tasks = make_synthetic(2, 48, 6, 2, 5).unwrap();
        for kind in [ModelKind::Dib, ModelKind::Rir, ModelKind::Mhmlp] {
            let a = run_continual(&cond(kind, true), &tasks, &tiny_arch(), &settings()).unwrap();
            let b = run_continual(&cond(kind, true), &tasks, &tiny_arch(), &settings()).unwrap();
            assert_eq!(a.learner, b.learner);
            assert_eq!(a.test_errors, b.test_errors);
        }
    }

    #[test]
    fn lower_bound_single_task() {
        let tasks = make_synthetic(1, 200, 6, 2, 6).unwrap();
        let lb = train_lower_bound(&tasks, &tiny_arch(), &settings(), 40, 1).unwrap();
        assert_eq!(lb.per_task_error.len(), 1);
        assert!(lb.mean_error < 10.0, "{}", lb.mean_error);
    }

    #[test]
    fn train_task_requires_memnet() {
        let tasks = make_synthetic(1, 32, 6, 2, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut learner = build_learner(ModelKind::Dib, &tiny_arch(), 6, 2, &mut rng).unwrap();
        let mut sched = EpsilonSchedule::default();
        let err = train_task(
            &mut learner,
            &tasks.tasks[0],
            0,
            &cond(ModelKind::Dib, false),
            &settings(),
            &[],
            &mut sched,
            &mut rng,
        );
        assert!(matches!(err, Err(Error::MissingMemNet(0))));
    }
}
