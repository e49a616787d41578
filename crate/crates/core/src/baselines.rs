//! Aggregation baselines: compress a bag to one vector (a randomly chosen
//! instance, the column sum, or the column mean) and apply a linear head.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::Bag;
use crate::numerics::DenseMatrix;
use crate::rng::{derive_seed, mix64, rng_for, stable_hash};
use crate::training::loss::bce_loss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    RandomSelection,
    ElementwiseAddition,
    ElementwiseAverage,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::RandomSelection,
        BaselineKind::ElementwiseAddition,
        BaselineKind::ElementwiseAverage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::RandomSelection => "random_selection",
            BaselineKind::ElementwiseAddition => "elementwise_addition",
            BaselineKind::ElementwiseAverage => "elementwise_average",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown baseline kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineParams {
    pub kind: BaselineKind,
    /// `d x 1`
    pub head_weights: DenseMatrix,
    /// `1 x 1`
    pub head_bias: DenseMatrix,
    /// Seed for random selection at evaluation time.
    pub eval_seed: u64,
}

impl BaselineParams {
    pub fn init(kind: BaselineKind, d: usize, weight_std: f64, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::arg("baseline width must be positive"));
        }
        let mut rng = rng_for(seed, "baseline-init", 0);
        Ok(Self {
            kind,
            head_weights: DenseMatrix::from_fn(d, 1, |_, _| {
                weight_std * rng.sample::<f64, _>(StandardNormal)
            }),
            head_bias: DenseMatrix::zeros(1, 1),
            eval_seed: derive_seed(seed, "baseline-eval", 0),
        })
    }

    pub fn d(&self) -> usize {
        self.head_weights.rows()
    }

    pub fn tensors(&self) -> Vec<(String, &DenseMatrix)> {
        vec![
            ("head_weights".to_owned(), &self.head_weights),
            ("head_bias".to_owned(), &self.head_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        vec![&mut self.head_weights, &mut self.head_bias]
    }

    /// Logit and gradients `[∂W, ∂b]` of the BCE loss.
    pub fn loss_and_grads(&self, bag: &Bag, epoch_seed: u64) -> Result<(f64, f64, Vec<DenseMatrix>)> {
        let agg = aggregate(bag, self, epoch_seed)?;
        let logit = linear_logit(&agg, &self.head_weights, self.head_bias.get(0, 0));
        let (loss, g) = bce_loss(logit, bag.label);
        let gw = DenseMatrix::column_vector(agg.iter().map(|a| a * g).collect());
        Ok((loss, logit, vec![gw, DenseMatrix::filled(1, 1, g)]))
    }
}

/// Row index picked for `app_id` under `seed`.
pub fn selected_instance(app_id: &str, seed: u64, n: usize) -> usize {
    (mix64(stable_hash(app_id) ^ mix64(seed)) % n as u64) as usize
}

pub fn aggregate(bag: &Bag, params: &BaselineParams, epoch_seed: u64) -> Result<Vec<f64>> {
    let x = &bag.embeddings;
    if x.rows() == 0 {
        return Err(Error::arg(format!("bag {} is empty", bag.app_id)));
    }
    if x.cols() != params.d() {
        return Err(Error::shape("baseline aggregate", x.shape(), (x.rows(), params.d())));
    }
    Ok(match params.kind {
        BaselineKind::RandomSelection => {
            x.row(selected_instance(&bag.app_id, epoch_seed, x.rows())).to_vec()
        }
        BaselineKind::ElementwiseAddition => x.column_sums().into_data(),
        BaselineKind::ElementwiseAverage => x.column_means().into_data(),
    })
}

fn linear_logit(agg: &[f64], w: &DenseMatrix, b: f64) -> f64 {
    agg.iter().zip(w.data()).map(|(a, w)| a * w).sum::<f64>() + b
}

pub fn baseline_forward(bag: &Bag, params: &BaselineParams, epoch_seed: u64) -> Result<f64> {
    let agg = aggregate(bag, params, epoch_seed)?;
    Ok(linear_logit(&agg, &params.head_weights, params.head_bias.get(0, 0)))
}
