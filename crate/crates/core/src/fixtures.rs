//! Random inputs for tests, benches and the verification suites.

use chrono::NaiveDate;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::model::Bag;
use crate::numerics::{softmax_rows, DenseMatrix};
use crate::rng::Rng;

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Row-stochastic `n x n` matrix: softmax of standard normal logits.
pub fn random_softmax_matrix(rng: &mut Rng, n: usize) -> DenseMatrix {
    softmax_rows(&random_matrix(rng, n, n, 1.0))
}

pub fn random_bag(rng: &mut Rng, app_id: &str, n: usize, d: usize) -> Bag {
    let label = u8::from(rng.random_bool(0.5));
    Bag {
        app_id: app_id.to_owned(),
        label,
        date: NaiveDate::from_ymd_opt(2019, 6, 1).expect("valid date"),
        embeddings: random_matrix(rng, n, d, 1.0),
    }
}
