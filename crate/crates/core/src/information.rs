//! Information measures: the per-batch joint Fisher load and its reward, the
//! empirical Fisher diagonal, and the EWC penalty built on it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::learner::{module_key, Learner};
use crate::model::{DibModel, ForwardTrace, ModuleGrads};
use crate::nn::{softmax, GradSet, Mlp, ParamBank};
use crate::tensor::Tensor2D;

/// Gradient of `sum_r log p(y_r | x_r)` with respect to the logits,
/// `onehot - softmax`.
pub fn loglik_logit_grad(logits: &Tensor2D, labels: &[usize]) -> Result<Tensor2D> {
    if labels.len() != logits.rows() {
        return Err(Error::ShapeMismatch {
            op: "loglik_logit_grad",
            detail: format!("{} labels for {} rows", labels.len(), logits.rows()),
        });
    }
    crate::nn::check_labels(labels, logits.cols())?;
    let mut g = softmax(logits);
    g.scale_in_place(-1.0);
    for (r, &y) in labels.iter().enumerate() {
        let v = g.get(r, y);
        g.set(r, y, v + 1.0);
    }
    Ok(g)
}

/// Mean over the parameters of every activated module (both cells) of the
/// squared gradient of the batch's summed log-likelihood. Works on scratch
/// tensors; the model's values and accumulators are untouched.
pub fn joint_fisher_batch(model: &DibModel, trace: &ForwardTrace, labels: &[usize]) -> Result<f64> {
    let upstream = loglik_logit_grad(&trace.class_logits, labels)?;
    let grads = model.classification_grads(trace, &upstream)?;
    joint_fisher_from_grads(&grads, 1.0)
}

/// Joint Fisher load from module gradients of the *mean* cross-entropy: the
/// summed log-likelihood gradient is `-batch_size` times those.
pub fn joint_fisher_from_grads(grads: &ModuleGrads, batch_size: f64) -> Result<f64> {
    let n = grads.num_params();
    if n == 0 {
        return Err(Error::InvalidArgument("no activated modules in batch".into()));
    }
    Ok(batch_size * batch_size * grads.sum_squares() / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardScale {
    pub lambda_reward: f64,
}

/// `r = -lambda * J`, shared by every routing decision in the batch.
pub fn reward(joint_fisher: f64, scale: RewardScale) -> f64 {
    -scale.lambda_reward * joint_fisher
}

/// Frozen parameter value and Fisher diagonal entry for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorEntry {
    pub theta_star: Tensor2D,
    pub fisher_diag: Tensor2D,
}

/// Snapshot of the regularized parameters after a task, with their Fisher
/// diagonal. Keys: bank name, then parameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherAnchor {
    pub task_id: usize,
    pub banks: BTreeMap<String, BTreeMap<String, AnchorEntry>>,
}

impl FisherAnchor {
    pub fn num_params(&self) -> usize {
        self.banks
            .values()
            .flat_map(|b| b.values())
            .map(|e| e.theta_star.len())
            .sum()
    }

    pub fn fisher(&self, bank: &str, param: &str) -> Option<&Tensor2D> {
        self.banks.get(bank)?.get(param).map(|e| &e.fisher_diag)
    }
}

type SquareSums = BTreeMap<String, BTreeMap<String, Tensor2D>>;

fn add_grads(into: &mut BTreeMap<String, Tensor2D>, grads: &GradSet) -> Result<()> {
    for (name, g) in &grads.grads {
        match into.get_mut(name) {
            Some(t) => t.add_assign(g)?,
            None => {
                into.insert(name.clone(), g.clone());
            }
        }
    }
    Ok(())
}

fn mlp_square_sums(net: &Mlp, x: &Tensor2D, labels: &[usize]) -> Result<GradSet> {
    let (logits, cache) = net.forward_cached(x)?;
    let up = loglik_logit_grad(&logits, labels)?;
    Ok(net.backward_per_row_squares(&cache, &up, false)?.0)
}

fn chunk_square_sums(learner: &Learner, x: &Tensor2D, labels: &[usize], task_id: usize, acc: &mut SquareSums) -> Result<()> {
    match learner {
        Learner::Mlp(net) => {
            let g = mlp_square_sums(net, x, labels)?;
            add_grads(acc.entry("mlp".into()).or_default(), &g)
        }
        Learner::MultiHead(mh) => {
            let (h, trunk_cache) = mh.trunk.forward_cached(x)?;
            let head = mh.head(task_id)?;
            let (logits, head_cache) = head.forward_cached(&h)?;
            let up = loglik_logit_grad(&logits, labels)?;
            let (_, dh) = head.backward(&head_cache, &up, true)?;
            let dh = dh.expect("requested");
            let (g, _) = mh.trunk.backward_per_row_squares(&trunk_cache, &dh, false)?;
            add_grads(acc.entry("trunk".into()).or_default(), &g)
        }
        Learner::Dib(model) => {
            // Protect the path the task's MemNets choose at inference.
            let actions = model.route_infer(x, task_id)?;
            let grads = model.per_sample_squared_grads(x, &actions, |logits| {
                loglik_logit_grad(logits, labels)
            })?;
            for (c, m, g) in &grads.entries {
                add_grads(acc.entry(module_key(*c, *m)).or_default(), g)?;
            }
            Ok(())
        }
    }
}

const FISHER_CHUNK: usize = 256;

/// Empirical Fisher diagonal over the first `sample_count` samples of
/// `dataset` (true labels), and a snapshot of the current parameters. Only
/// the learner's regularized parameter groups are covered.
pub fn empirical_fisher_diag(
    learner: &Learner,
    dataset: &LabeledSet,
    sample_count: usize,
    task_id: usize,
) -> Result<FisherAnchor> {
    if sample_count == 0 {
        return Err(Error::InvalidArgument("Fisher sample_count must be >= 1".into()));
    }
    if sample_count > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "Fisher sample_count {sample_count} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let mut sums = SquareSums::new();
    let mut start = 0;
    while start < sample_count {
        let end = (start + FISHER_CHUNK).min(sample_count);
        let idx: Vec<usize> = (start..end).collect();
        let x = dataset.inputs.gather_rows(&idx);
        let labels = &dataset.labels[start..end];
        chunk_square_sums(learner, &x, labels, task_id, &mut sums)?;
        start = end;
    }
    let scale = 1.0 / sample_count as f64;
    let mut banks = BTreeMap::new();
    for (key, bank) in learner.regularized_banks() {
        let bank_sums = sums.get(&key);
        let mut entries = BTreeMap::new();
        for (name, p) in bank.iter() {
            let fisher_diag = match bank_sums.and_then(|s| s.get(name)) {
                Some(s) => {
                    let mut f = s.clone();
                    f.scale_in_place(scale);
                    f
                }
                None => Tensor2D::zeros_like(&p.value),
            };
            entries.insert(
                name.clone(),
                AnchorEntry {
                    theta_star: p.value.clone(),
                    fisher_diag,
                },
            );
        }
        banks.insert(key, entries);
    }
    Ok(FisherAnchor { task_id, banks })
}

/// `sum_anchors (lambda / 2) sum_i F_i (theta_i - theta*_i)^2`; accumulates
/// `lambda F_i (theta_i - theta*_i)` into the matching gradients.
pub fn ewc_penalty_and_grads(
    banks: &mut [(String, &mut ParamBank)],
    anchors: &[FisherAnchor],
    lambda_ewc: f64,
) -> Result<f64> {
    let mut loss = 0.0;
    for anchor in anchors {
        if anchor.banks.len() != banks.len() {
            return Err(Error::AnchorMismatch(format!(
                "anchor for task {} covers {} groups, model has {}",
                anchor.task_id,
                anchor.banks.len(),
                banks.len()
            )));
        }
        for (key, bank) in banks.iter_mut() {
            let entries = anchor.banks.get(key.as_str()).ok_or_else(|| {
                Error::AnchorMismatch(format!("anchor lacks parameter group {key}"))
            })?;
            if entries.len() != bank.len() {
                return Err(Error::AnchorMismatch(format!("parameter set of {key} differs")));
            }
            for (name, param) in bank.iter_mut() {
                let e = entries.get(name).ok_or_else(|| {
                    Error::AnchorMismatch(format!("anchor lacks {key}/{name}"))
                })?;
                if !e.theta_star.same_shape(&param.value) || !e.fisher_diag.same_shape(&param.value) {
                    return Err(Error::AnchorMismatch(format!(
                        "{key}/{name}: anchor {:?}, parameter {:?}",
                        e.theta_star.shape(),
                        param.value.shape()
                    )));
                }
                let values = param.value.data();
                let grad = param.grad.data_mut();
                for i in 0..values.len() {
                    let f = e.fisher_diag.data()[i];
                    let d = values[i] - e.theta_star.data()[i];
                    loss += 0.5 * lambda_ewc * f * d * d;
                    grad[i] += lambda_ewc * f * d;
                }
            }
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bias_name, weight_name};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_bank(v: f64) -> ParamBank {
        let mut b = ParamBank::new();
        b.insert("w", Tensor2D::from_rows(&[vec![v]]));
        b
    }

    fn scalar_anchor(theta: f64, fisher: f64) -> FisherAnchor {
        let mut entries = BTreeMap::new();
        entries.insert(
            "w".to_string(),
            AnchorEntry {
                theta_star: Tensor2D::from_rows(&[vec![theta]]),
                fisher_diag: Tensor2D::from_rows(&[vec![fisher]]),
            },
        );
        FisherAnchor {
            task_id: 0,
            banks: BTreeMap::from([("g".to_string(), entries)]),
        }
    }

    #[test]
    fn ewc_hand_quadratic() {
        let mut bank = scalar_bank(3.0);
        let loss = ewc_penalty_and_grads(&mut [("g".into(), &mut bank)], &[scalar_anchor(0.0, 2.0)], 1.0).unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(bank.grad("w").data(), &[6.0]);
    }

    #[test]
    fn ewc_zero_at_anchor_and_zero_fisher() {
        let mut bank = scalar_bank(1.5);
        let loss = ewc_penalty_and_grads(&mut [("g".into(), &mut bank)], &[scalar_anchor(1.5, 4.0)], 10.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(bank.grad("w").data(), &[0.0]);
        let loss = ewc_penalty_and_grads(&mut [("g".into(), &mut bank)], &[scalar_anchor(-7.0, 0.0)], 10.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn ewc_shape_mismatch() {
        let mut bank = ParamBank::new();
        bank.insert("w", Tensor2D::zeros(2, 1));
        let err = ewc_penalty_and_grads(&mut [("g".into(), &mut bank)], &[scalar_anchor(0.0, 1.0)], 1.0);
        assert!(matches!(err, Err(Error::AnchorMismatch(_))));
    }

    #[test]
    fn reward_sign_and_scale() {
        assert_eq!(reward(0.0, RewardScale { lambda_reward: 5.0 }), 0.0);
        assert!((reward(0.02, RewardScale { lambda_reward: 100.0 }) + 2.0).abs() < 1e-12);
        for j in [0.0, 1e-9, 3.0, 1e6] {
            assert!(reward(j, RewardScale { lambda_reward: 10.0 }) <= 0.0);
        }
    }

    /// Logistic model `p(y=1|x) = sigma(theta x)` embedded as a 1 -> 2 layer
    /// whose logits are `[theta x, 0]`.
    fn logistic(theta: f64) -> Mlp {
        let mut net = Mlp::new(&[1, 2], false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        *net.bank.value_mut(&weight_name(0)) = Tensor2D::from_rows(&[vec![theta, 0.0]]);
        *net.bank.value_mut(&bias_name(0)) = Tensor2D::zeros(1, 2);
        net
    }

    #[test]
    fn logistic_fisher_quarter() {
        let learner = Learner::Mlp(logistic(0.0));
        let set = LabeledSet::new(Tensor2D::from_rows(&[vec![1.0]]), vec![0], 2).unwrap();
        let anchor = empirical_fisher_diag(&learner, &set, 1, 0).unwrap();
        let f = anchor.fisher("mlp", &weight_name(0)).unwrap();
        assert!((f.get(0, 0) - 0.25).abs() < 1e-15);
        assert!(f.data().iter().all(|&v| v >= 0.0));
        assert!(empirical_fisher_diag(&learner, &set, 0, 0).is_err());
    }

    #[test]
    fn identical_samples_give_square() {
        let learner = Learner::Mlp(logistic(0.3));
        let x = Tensor2D::from_rows(&[vec![0.8], vec![0.8]]);
        let set = LabeledSet::new(x, vec![1, 1], 2).unwrap();
        let one = empirical_fisher_diag(&learner, &set, 1, 0).unwrap();
        let two = empirical_fisher_diag(&learner, &set, 2, 0).unwrap();
        assert_eq!(one, two);
    }
}
