//! Fast numerical self-checks behind the `verify` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Checkpoint};
use crate::data::make_synthetic;
use crate::error::Result;
use crate::information::{empirical_fisher_diag, joint_fisher_batch};
use crate::learner::{Learner, ModelKind};
use crate::model::{pooled_module_apply, DibConfig, DibModel, RoutingMode};
use crate::nn::{adam_step, log_softmax, softmax_xent, AdamConfig, Mlp};
use crate::routing::{greedy_actions, router_loss_and_grads, select_actions, EpsilonSchedule};
use crate::tensor::Tensor2D;
use crate::trainer::{run_continual, Architecture, RunCondition, TrainSettings};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2D {
    Tensor2D::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("sizes agree")
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Summed log-likelihood of `labels` under `net`.
fn loglik(net: &Mlp, x: &Tensor2D, labels: &[usize]) -> Result<f64> {
    let lp = log_softmax(&net.forward(x)?);
    Ok(labels.iter().enumerate().map(|(r, &y)| lp.get(r, y)).sum())
}

/// Zero biases can leave a ReLU input at exactly 0, where finite
/// differences are meaningless.
fn randomize_biases(net: &mut Mlp, rng: &mut impl Rng) {
    for layer in 0..net.num_layers() {
        for b in net.bank.value_mut(&crate::nn::bias_name(layer)).data_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
}

fn gradient_check(cases: usize, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let batch = rng.gen_range(1..=8);
        let sizes = [rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(2..=8)];
        let mut net = Mlp::new(&sizes, rng.gen_bool(0.5), rng)?;
        randomize_biases(&mut net, rng);
        let x = random_tensor(batch, sizes[0], rng);
        let y: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..sizes[2])).collect();
        let (logits, cache) = net.forward_cached(&x)?;
        let out = softmax_xent(&logits, &y)?;
        let (grads, _) = net.backward(&cache, &out.dlogits, false)?;
        for (name, g) in &grads.grads {
            let i = rng.gen_range(0..g.len());
            let orig = net.bank.value(name).data()[i];
            net.bank.value_mut(name).data_mut()[i] = orig + h;
            let up = softmax_xent(&net.forward(&x)?, &y)?.loss;
            net.bank.value_mut(name).data_mut()[i] = orig - h;
            let down = softmax_xent(&net.forward(&x)?, &y)?.loss;
            net.bank.value_mut(name).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            if fd.abs() > 1e-7 || g.data()[i].abs() > 1e-7 {
                worst = worst.max(rel_err(fd, g.data()[i]));
            }
        }
    }
    Ok((worst <= 1e-5, format!("{cases} networks, worst relative error {worst:.2e}")))
}

fn pooled_check(cases: usize, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    for _ in 0..cases {
        let k = rng.gen_range(1..=4);
        let (d, w) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let modules = (0..k)
            .map(|_| Mlp::new(&[d, w, w], true, rng))
            .collect::<Result<Vec<_>>>()?;
        let b = rng.gen_range(1..=32);
        let x = random_tensor(b, d, rng);
        let actions: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let pooled = pooled_module_apply(&modules, &x, &actions)?;
        for (r, &a) in actions.iter().enumerate() {
            let single = modules[a].forward(&x.gather_rows(&[r]))?;
            if single.row(0) != pooled.row(r) {
                return Ok((false, format!("row {r} differs")));
            }
        }
    }
    Ok((true, format!("{cases} random batches bitwise equal")))
}

fn schedule_check() -> Result<(bool, String)> {
    let s = EpsilonSchedule::default();
    let expected = [(0u64, 1.0), (1000, 0.1 + 0.9 * (-1.0f64).exp()), (1_000_000, 0.1)];
    let worst = expected
        .iter()
        .map(|&(t, e)| (s.epsilon(t) - e).abs())
        .fold(0.0, f64::max);
    Ok((worst <= 1e-12, format!("worst deviation {worst:.1e}")))
}

fn tiny_dib(rng: &mut ChaCha8Rng) -> Result<DibModel> {
    let cfg = DibConfig {
        num_cells: 2,
        modules_per_cell: 3,
        module_width: 4,
        module_layers: 2,
        router_hidden: vec![5],
        memnet_hidden: vec![5],
        input_dim: 6,
        output_dim: 3,
    };
    let mut m = DibModel::new(cfg, RoutingMode::Learned, rng)?;
    for cell in &mut m.cells {
        cell.modules.iter_mut().for_each(|module| randomize_biases(module, rng));
    }
    m.init_task(0, rng)?;
    Ok(m)
}

fn snapshot(m: &DibModel) -> [Vec<Tensor2D>; 3] {
    let mut groups: [Vec<Tensor2D>; 3] = Default::default();
    for cell in &m.cells {
        for module in &cell.modules {
            groups[0].extend(module.bank.iter().map(|(_, p)| p.value.clone()));
        }
        groups[1].extend(cell.router.bank.iter().map(|(_, p)| p.value.clone()));
        for mem in cell.memnets.values() {
            groups[2].extend(mem.bank.iter().map(|(_, p)| p.value.clone()));
        }
    }
    groups
}

fn isolation_check(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let base = tiny_dib(rng)?;
    let x = random_tensor(16, 6, rng);
    let y: Vec<usize> = (0..16).map(|_| rng.gen_range(0..3)).collect();
    let adam = AdamConfig::default();
    let before = snapshot(&base);
    let mut failures = Vec::new();
    for (loss, owner) in [("classification", 0usize), ("memnet", 2), ("router", 1)] {
        let mut m = base.clone();
        let trace = m.forward_train(&x, 0.5, rng, 0)?;
        match owner {
            0 => {
                let out = softmax_xent(&trace.class_logits, &y)?;
                m.backward_classification(&trace, &out.dlogits)?;
            }
            2 => {
                m.memnet_loss_and_grads(&trace)?;
            }
            _ => {
                m.router_loss_and_grads(&trace, -1.0)?;
            }
        }
        m.module_banks_mut().for_each(|b| adam_step(b, &adam));
        m.router_banks_mut().for_each(|b| adam_step(b, &adam));
        m.memnet_banks_mut(0).for_each(|b| adam_step(b, &adam));
        let after = snapshot(&m);
        for g in 0..3 {
            if (after[g] != before[g]) != (g == owner) {
                failures.push(format!("{loss} loss vs group {g}"));
            }
        }
    }
    Ok((failures.is_empty(), if failures.is_empty() { "each loss moves only its own group".into() } else { failures.join(", ") }))
}

fn fisher_check(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    // Per-sample finite differences of the log-likelihood on a small MLP.
    let h = 1e-5;
    let sizes = [3, 4, 2];
    let mut net = Mlp::new(&sizes, false, rng)?;
    randomize_biases(&mut net, rng);
    let n = 5;
    let x = random_tensor(n, 3, rng);
    let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let set = crate::data::LabeledSet::new(x.clone(), y.clone(), 2)?;
    let learner = Learner::Mlp(net.clone());
    let anchor = empirical_fisher_diag(&learner, &set, n, 0)?;
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for name in net.bank.names() {
        let len = net.bank.value(name).len();
        let fisher = anchor.fisher("mlp", name).expect("anchored");
        for i in 0..len {
            let mut acc = 0.0;
            for s in 0..n {
                let xs = x.gather_rows(&[s]);
                let orig = net.bank.value(name).data()[i];
                probe.bank.value_mut(name).data_mut()[i] = orig + h;
                let up = loglik(&probe, &xs, &y[s..=s])?;
                probe.bank.value_mut(name).data_mut()[i] = orig - h;
                let down = loglik(&probe, &xs, &y[s..=s])?;
                probe.bank.value_mut(name).data_mut()[i] = orig;
                acc += ((up - down) / (2.0 * h)).powi(2);
            }
            let oracle = acc / n as f64;
            if oracle > 1e-10 || fisher.data()[i] > 1e-10 {
                worst = worst.max(rel_err(oracle, fisher.data()[i]));
            }
        }
    }

    // Batch joint Fisher on a routed model against finite differences of the
    // summed log-likelihood over the activated modules.
    let model = tiny_dib(rng)?;
    let xb = random_tensor(4, 6, rng);
    let yb: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
    let trace = model.forward_train(&xb, 1.0, rng, 0)?;
    let j = joint_fisher_batch(&model, &trace, &yb)?;
    let actions: Vec<Vec<usize>> = trace.decisions.iter().map(|d| d.actions.clone()).collect();
    let ll = |m: &DibModel| -> Result<f64> {
        let lp = log_softmax(&m.forward_routed(&xb, &actions)?);
        Ok(yb.iter().enumerate().map(|(r, &c)| lp.get(r, c)).sum())
    };
    let (mut sum_sq, mut count) = (0.0, 0usize);
    let mut probe = model.clone();
    for (c, k) in trace.activated_modules() {
        let names: Vec<String> = model.cells[c].modules[k].bank.names().cloned().collect();
        for name in names {
            for i in 0..model.cells[c].modules[k].bank.value(&name).len() {
                let orig = model.cells[c].modules[k].bank.value(&name).data()[i];
                probe.cells[c].modules[k].bank.value_mut(&name).data_mut()[i] = orig + h;
                let up = ll(&probe)?;
                probe.cells[c].modules[k].bank.value_mut(&name).data_mut()[i] = orig - h;
                let down = ll(&probe)?;
                probe.cells[c].modules[k].bank.value_mut(&name).data_mut()[i] = orig;
                sum_sq += ((up - down) / (2.0 * h)).powi(2);
                count += 1;
            }
        }
    }
    let j_oracle = sum_sq / count as f64;
    worst = worst.max(rel_err(j_oracle, j));
    Ok((worst <= 1e-4, format!("worst relative error {worst:.2e}")))
}

/// Trains a lone router on one frozen input where module 3 pays 0 and every
/// other module pays -1; returns the greedy choice after `steps`.
pub fn bandit_run(seed: u64, steps: usize) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut router = Mlp::new(&[8, 16, 10], false, &mut rng)?;
    let x = random_tensor(1, 8, &mut rng);
    let mut schedule = EpsilonSchedule::default();
    let adam = AdamConfig::default();
    for _ in 0..steps {
        let (q, cache) = router.forward_cached(&x)?;
        let sel = select_actions(&q, schedule.current(), &mut rng);
        let reward = if sel.actions[0] == 3 { 0.0 } else { -1.0 };
        let (_, dq) = router_loss_and_grads(&q, &sel.actions, reward)?;
        let (grads, _) = router.backward(&cache, &dq, false)?;
        router.accumulate(&grads)?;
        adam_step(&mut router.bank, &adam);
        router.bank.zero_grads();
        schedule.advance();
    }
    Ok(greedy_actions(&router.forward(&x)?)[0])
}

fn bandit_check() -> Result<(bool, String)> {
    let hits = (0..10u64)
        .map(|s| bandit_run(s, 2000).map(|a| a == 3))
        .collect::<Result<Vec<bool>>>()?
        .iter()
        .filter(|&&h| h)
        .count();
    Ok((hits >= 9, format!("{hits}/10 seeds pick module 3")))
}

fn pipeline_check() -> Result<(bool, String)> {
    let tasks = make_synthetic(2, 64, 8, 2, 0)?;
    let arch = Architecture {
        num_cells: 2,
        modules_per_cell: 3,
        module_width: 8,
        module_layers: 2,
        router_hidden: vec![8],
        memnet_hidden: vec![8],
        mlp_hidden: 16,
    };
    let cond = RunCondition {
        model_kind: ModelKind::Dib,
        ewc: true,
        lambda_value: 10.0,
        epochs_per_task: 2,
        trials: 1,
        seed: 1,
    };
    let settings = TrainSettings {
        batch_size: 16,
        fisher_samples: 32,
        ..Default::default()
    };
    let a = run_continual(&cond, &tasks, &arch, &settings)?;
    let b = run_continual(&cond, &tasks, &arch, &settings)?;
    let ckpt = Checkpoint {
        condition: cond,
        architecture: arch,
        dataset: "synthetic".into(),
        tasks_done: 2,
        learner: a.learner.clone(),
        anchors: a.anchors.clone(),
        schedule: a.schedule,
    };
    let bytes = checkpoint::to_bytes(&ckpt)?;
    let back = checkpoint::from_bytes(&bytes)?;
    let ok = a.test_errors == b.test_errors && a.learner == b.learner && back == ckpt && a.anchors.len() == 2;
    Ok((ok, "repeat runs identical, checkpoint round trip exact".into()))
}

/// Runs every self-check with a fixed seed.
pub fn run_all() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    vec![
        check("layer gradients vs finite differences", || gradient_check(100, &mut rng)),
        check("pooled routing vs per-sample", || pooled_check(200, &mut rng)),
        check("epsilon schedule closed form", schedule_check),
        check("loss isolation by parameter group", || isolation_check(&mut rng)),
        check("fisher estimates vs finite differences", || fisher_check(&mut rng)),
        check("router bandit convergence", bandit_check),
        check("determinism and checkpoint round trip", pipeline_check),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for r in super::run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
