//! Uniform handle over the trainable model families.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::MultiHeadMlp;
use crate::error::Result;
use crate::model::DibModel;
use crate::nn::{Mlp, ParamBank};
use crate::tensor::Tensor2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Mhmlp,
    Dib,
    Rir,
}

impl ModelKind {
    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Mlp => "MLP",
            ModelKind::Mhmlp => "MHMLP",
            ModelKind::Dib => "DIB",
            ModelKind::Rir => "RIR",
        }
    }

    pub fn is_routed(&self) -> bool {
        matches!(self, ModelKind::Dib | ModelKind::Rir)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(ModelKind::Mlp),
            "mhmlp" => Ok(ModelKind::Mhmlp),
            "dib" => Ok(ModelKind::Dib),
            "rir" => Ok(ModelKind::Rir),
            other => Err(format!("unknown model kind '{other}' (expected mlp, mhmlp, dib or rir)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Learner {
    Mlp(Mlp),
    MultiHead(MultiHeadMlp),
    Dib(DibModel),
}

impl Learner {
    /// Per-task setup: fresh MemNets for routed models, a fresh head for the
    /// multi-head baseline, nothing for the plain MLP.
    pub fn start_task(&mut self, task_id: usize, rng: &mut impl Rng) -> Result<()> {
        match self {
            Learner::Mlp(_) => Ok(()),
            Learner::MultiHead(m) => m.start_task(task_id, rng),
            Learner::Dib(m) => m.init_task(task_id, rng),
        }
    }

    /// Inference logits for inputs of task `task_id`.
    pub fn predict(&self, x: &Tensor2D, task_id: usize) -> Result<Tensor2D> {
        match self {
            Learner::Mlp(m) => m.forward(x),
            Learner::MultiHead(m) => m.forward(x, task_id),
            Learner::Dib(m) => m.forward_infer(x, task_id),
        }
    }

    /// Parameter groups protected by EWC, keyed by a stable name. The
    /// multi-head task heads, routers and MemNets are never included.
    pub fn regularized_banks(&self) -> Vec<(String, &ParamBank)> {
        match self {
            Learner::Mlp(m) => vec![("mlp".to_string(), &m.bank)],
            Learner::MultiHead(m) => vec![("trunk".to_string(), &m.trunk.bank)],
            Learner::Dib(m) => m
                .cells
                .iter()
                .enumerate()
                .flat_map(|(c, cell)| {
                    cell.modules
                        .iter()
                        .enumerate()
                        .map(move |(k, module)| (module_key(c, k), &module.bank))
                })
                .collect(),
        }
    }

    pub fn regularized_banks_mut(&mut self) -> Vec<(String, &mut ParamBank)> {
        match self {
            Learner::Mlp(m) => vec![("mlp".to_string(), &mut m.bank)],
            Learner::MultiHead(m) => vec![("trunk".to_string(), &mut m.trunk.bank)],
            Learner::Dib(m) => m
                .cells
                .iter_mut()
                .enumerate()
                .flat_map(|(c, cell)| {
                    cell.modules
                        .iter_mut()
                        .enumerate()
                        .map(move |(k, module)| (module_key(c, k), &mut module.bank))
                })
                .collect(),
        }
    }

    pub fn as_dib(&self) -> Option<&DibModel> {
        match self {
            Learner::Dib(m) => Some(m),
            _ => None,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Learner::Mlp(m) => m.num_params(),
            Learner::MultiHead(m) => {
                m.trunk.num_params() + m.heads.values().map(Mlp::num_params).sum::<usize>()
            }
            Learner::Dib(m) => {
                m.module_param_count()
                    + m.router_param_count()
                    + m.memnet_param_count_per_task() * m.task_ids().len()
            }
        }
    }
}

pub fn module_key(cell: usize, module: usize) -> String {
    format!("cell{cell}.module{module}")
}
