//! Router machinery: the exploration schedule, epsilon-greedy selection,
//! the single-step Q-learning loss and uniform random routing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor2D;

/// Exponentially decaying exploration rate,
/// `eps_t = eps_min + (eps_max - eps_min) * exp(-decay_lambda * t)`.
///
/// `step` is shared by every cell and advances once per training batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub eps_min: f64,
    pub eps_max: f64,
    pub decay_lambda: f64,
    pub step: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            eps_min: 0.1,
            eps_max: 1.0,
            decay_lambda: 0.001,
            step: 0,
        }
    }
}

impl EpsilonSchedule {
    /// Rate at step `t`.
    pub fn epsilon(&self, t: u64) -> f64 {
        self.eps_min + (self.eps_max - self.eps_min) * (-self.decay_lambda * t as f64).exp()
    }

    /// Rate at the current step.
    pub fn current(&self) -> f64 {
        self.epsilon(self.step)
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }
}

/// Chosen module per sample and whether it came from the exploration branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub actions: Vec<usize>,
    pub explored: Vec<bool>,
}

/// Per-sample epsilon-greedy choice over the columns of `q_logits`.
/// Greedy ties resolve to the lowest index.
pub fn select_actions(q_logits: &Tensor2D, epsilon: f64, rng: &mut impl Rng) -> Selection {
    let n = q_logits.cols();
    let mut actions = Vec::with_capacity(q_logits.rows());
    let mut explored = Vec::with_capacity(q_logits.rows());
    for r in 0..q_logits.rows() {
        // Always draw so the random stream does not depend on epsilon == 0/1.
        let u: f64 = rng.gen();
        if u < epsilon {
            actions.push(rng.gen_range(0..n));
            explored.push(true);
        } else {
            actions.push(q_logits.argmax_row(r));
            explored.push(false);
        }
    }
    Selection { actions, explored }
}

/// Greedy actions, lowest-index tie-break.
pub fn greedy_actions(q_logits: &Tensor2D) -> Vec<usize> {
    (0..q_logits.rows()).map(|r| q_logits.argmax_row(r)).collect()
}

/// Uniform i.i.d. module choice used by random routing.
pub fn rir_select(batch_size: usize, num_modules: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..batch_size).map(|_| rng.gen_range(0..num_modules)).collect()
}

/// `L = sum_b (r - q[b][a_b])^2` and its gradient with respect to the logits.
/// Only the chosen action's logit receives gradient, `2 (q - r)`.
pub fn router_loss_and_grads(
    q_logits: &Tensor2D,
    actions: &[usize],
    reward: f64,
) -> Result<(f64, Tensor2D)> {
    if actions.len() != q_logits.rows() {
        return shape_err(
            "router_loss_and_grads",
            format!("{} actions for {} rows", actions.len(), q_logits.rows()),
        );
    }
    if let Some(&a) = actions.iter().find(|&&a| a >= q_logits.cols()) {
        return shape_err(
            "router_loss_and_grads",
            format!("action {a} with {} modules", q_logits.cols()),
        );
    }
    let mut grad = Tensor2D::zeros_like(q_logits);
    let mut loss = 0.0;
    for (r, &a) in actions.iter().enumerate() {
        let q = q_logits.get(r, a);
        loss += (reward - q).powi(2);
        grad.set(r, a, 2.0 * (q - reward));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.epsilon(0), 1.0);
        assert!((s.epsilon(1000) - (0.1 + 0.9 * (-1.0f64).exp())).abs() < 1e-12);
        assert!((s.epsilon(100_000_000) - 0.1).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for t in (0..20_000).step_by(97) {
            let e = s.epsilon(t);
            assert!(e <= prev && (0.1..=1.0).contains(&e));
            prev = e;
        }
    }

    #[test]
    fn greedy_when_epsilon_zero() {
        let q = Tensor2D::from_rows(&[vec![0.1, 0.9, 0.3], vec![2.0, 2.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sel = select_actions(&q, 0.0, &mut rng);
        assert_eq!(sel.actions, vec![1, 0]);
        assert_eq!(sel.explored, vec![false, false]);
    }

    #[test]
    fn uniform_when_epsilon_one() {
        let q = Tensor2D::zeros(100_000, 10);
        let sel = select_actions(&q, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(sel.explored.iter().all(|&e| e));
        let mut counts = [0usize; 10];
        sel.actions.iter().for_each(|&a| counts[a] += 1);
        for c in counts {
            let freq = c as f64 / 100_000.0;
            assert!((freq - 0.1).abs() < 0.01, "{freq}");
        }
    }

    #[test]
    fn router_loss_cases() {
        let q = Tensor2D::from_rows(&[vec![0.0, 5.0]]);
        let (loss, g) = router_loss_and_grads(&q, &[0], -1.0).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(g.data(), &[2.0, 0.0]);

        let q = Tensor2D::from_rows(&[vec![-0.5, 1.0], vec![3.0, -0.5]]);
        let (loss, g) = router_loss_and_grads(&q, &[0, 1], -0.5).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rir_cases() {
        assert!(rir_select(50, 1, &mut ChaCha8Rng::seed_from_u64(0))
            .iter()
            .all(|&a| a == 0));
        let a = rir_select(64, 10, &mut ChaCha8Rng::seed_from_u64(4));
        let b = rir_select(64, 10, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }
}
