use std::fmt;
use std::str::FromStr;

use crate::baselines::{baseline_forward, BaselineKind, BaselineParams};
use crate::error::{Error, Result};
use crate::model::{init_params, Bag, ModelConfig, ModelParams};
use crate::numerics::DenseMatrix;

/// Which bag classifier to train or evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Category vector + Nyström attention blocks.
    Cmil,
    Baseline(BaselineKind),
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Baseline(BaselineKind::RandomSelection),
        ModelKind::Baseline(BaselineKind::ElementwiseAddition),
        ModelKind::Baseline(BaselineKind::ElementwiseAverage),
        ModelKind::Cmil,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cmil => "cmil",
            ModelKind::Baseline(BaselineKind::RandomSelection) => "baseline-random",
            ModelKind::Baseline(BaselineKind::ElementwiseAddition) => "baseline-addition",
            ModelKind::Baseline(BaselineKind::ElementwiseAverage) => "baseline-average",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::arg(format!(
                    "unknown model {s:?} (expected one of cmil, baseline-random, baseline-addition, baseline-average)"
                ))
            })
    }
}

/// Trainable parameters of either classifier family.
#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Cmil(ModelParams),
    Baseline(BaselineParams),
}

impl Classifier {
    pub fn init(kind: ModelKind, config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match kind {
            ModelKind::Cmil => Classifier::Cmil(init_params(config, seed)?),
            ModelKind::Baseline(b) => {
                Classifier::Baseline(BaselineParams::init(b, config.d, config.weight_std, seed)?)
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Classifier::Cmil(_) => ModelKind::Cmil,
            Classifier::Baseline(b) => ModelKind::Baseline(b.kind),
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Classifier::Cmil(p) => p.d,
            Classifier::Baseline(b) => b.d(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &DenseMatrix)> {
        match self {
            Classifier::Cmil(p) => p.tensors(),
            Classifier::Baseline(b) => b.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        match self {
            Classifier::Cmil(p) => p.tensors_mut(),
            Classifier::Baseline(b) => b.tensors_mut(),
        }
    }

    /// Evaluation-time logit (random selection uses the fixed eval seed).
    pub fn logit(&self, bag: &Bag) -> Result<f64> {
        match self {
            Classifier::Cmil(p) => p.forward(bag),
            Classifier::Baseline(b) => baseline_forward(bag, b, b.eval_seed),
        }
    }

    /// `(loss, logit, grads)` where `epoch_seed` only affects random selection.
    pub fn loss_and_grads(&self, bag: &Bag, epoch_seed: u64) -> Result<(f64, f64, Vec<DenseMatrix>)> {
        match self {
            Classifier::Cmil(p) => {
                let lg = p.loss_and_grads(bag)?;
                Ok((lg.loss, lg.logit, lg.grads))
            }
            Classifier::Baseline(b) => b.loss_and_grads(bag, epoch_seed),
        }
    }
}
