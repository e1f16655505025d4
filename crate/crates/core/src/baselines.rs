//! Dense baselines: a plain MLP and a multi-head MLP with one stored output
//! layer per task.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::tensor::Tensor2D;

/// Hidden width of the full-size baselines.
pub const FULL_MLP_HIDDEN: usize = 2000;

/// `input -> hidden -> hidden -> output`, ReLU on the hidden layers.
pub fn build_mlp_baseline(
    input_dim: usize,
    output_dim: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<Mlp> {
    Mlp::new(&[input_dim, hidden, hidden, output_dim], false, rng)
}

/// Shared trunk plus a task-specific head, created when a task starts and
/// looked up by task identity at inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadMlp {
    pub trunk: Mlp,
    pub heads: BTreeMap<usize, Mlp>,
    output_dim: usize,
}

pub fn build_mhmlp_baseline(
    input_dim: usize,
    output_dim: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<MultiHeadMlp> {
    Ok(MultiHeadMlp {
        trunk: Mlp::new(&[input_dim, hidden, hidden], true, rng)?,
        heads: BTreeMap::new(),
        output_dim,
    })
}

impl MultiHeadMlp {
    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Fresh head for `task_id`; an existing head for that id is replaced.
    pub fn start_task(&mut self, task_id: usize, rng: &mut impl Rng) -> Result<()> {
        let head = Mlp::new(&[self.trunk.output_dim(), self.output_dim], false, rng)?;
        self.heads.insert(task_id, head);
        Ok(())
    }

    pub fn head(&self, task_id: usize) -> Result<&Mlp> {
        self.heads
            .get(&task_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no head stored for task {task_id}")))
    }

    pub fn head_mut(&mut self, task_id: usize) -> Result<&mut Mlp> {
        self.heads
            .get_mut(&task_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no head stored for task {task_id}")))
    }

    pub fn forward(&self, x: &Tensor2D, task_id: usize) -> Result<Tensor2D> {
        self.head(task_id)?.forward(&self.trunk.forward(x)?)
    }
}

/// Scalar parameter count of an MLP with the given layer sizes.
pub fn dense_param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}
