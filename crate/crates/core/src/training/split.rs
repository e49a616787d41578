//! Shuffled 80/10/10 and temporal 2019→2020 split protocols.

use chrono::Datelike;
use log::warn;
use rand::seq::SliceRandom;

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stable_hash};

pub const TRAIN_YEAR: i32 = 2019;
pub const TEST_YEAR: i32 = 2020;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Shuffled,
    Temporal,
    Fixed,
}

/// Disjoint index lists into a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub protocol: Protocol,
    pub repetition: u64,
}

impl SplitPlan {
    /// Consecutive blocks `[0, train)`, `[train, train+val)`, then test.
    pub fn fixed(train: usize, validation: usize, test: usize) -> Self {
        Self {
            train: (0..train).collect(),
            validation: (train..train + validation).collect(),
            test: (train + validation..train + validation + test).collect(),
            protocol: Protocol::Fixed,
            repetition: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded shuffle keyed by `(seed, repetition)`; validation and test each
/// get `floor(n/10)` records and training keeps the remainder.
pub fn split_shuffled(manifest: &DatasetManifest, seed: u64, repetition: u64) -> Result<SplitPlan> {
    let n = manifest.len();
    if n == 0 {
        return Err(Error::arg("cannot split an empty manifest"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "shuffled-split", repetition));
    let tenth = n / 10;
    let test = order.split_off(n - tenth);
    let validation = order.split_off(n - 2 * tenth);
    Ok(SplitPlan {
        train: order,
        validation,
        test,
        protocol: Protocol::Shuffled,
        repetition,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSplit {
    pub plan: SplitPlan,
    /// Records dated outside both years.
    pub excluded: usize,
    /// Share of in-window records dated in the training year.
    pub train_fraction: f64,
    pub test_fraction: f64,
}

/// Train on the training year (minus a 10% validation carve-out), test on
/// the following year. The carve-out takes the `floor(n/10)` records with
/// the smallest app-id hash, so it depends only on the manifest contents.
pub fn split_temporal(manifest: &DatasetManifest) -> Result<TemporalSplit> {
    let mut pool = Vec::new();
    let mut test = Vec::new();
    let mut excluded = 0;
    for (i, r) in manifest.records.iter().enumerate() {
        match r.date.year() {
            TRAIN_YEAR => pool.push(i),
            TEST_YEAR => test.push(i),
            _ => excluded += 1,
        }
    }
    if excluded > 0 {
        warn!("temporal split: {excluded} records outside {TRAIN_YEAR}/{TEST_YEAR} excluded");
    }
    if pool.is_empty() {
        return Err(Error::arg(format!("no records dated {TRAIN_YEAR} for training")));
    }
    if test.is_empty() {
        return Err(Error::arg(format!("no records dated {TEST_YEAR} for testing")));
    }
    let in_window = (pool.len() + test.len()) as f64;
    let train_fraction = pool.len() as f64 / in_window;
    let test_fraction = test.len() as f64 / in_window;

    let mut by_hash = pool.clone();
    by_hash.sort_by_key(|&i| (stable_hash(&manifest.records[i].app_id), i));
    let mut validation: Vec<usize> = by_hash[..pool.len() / 10].to_vec();
    validation.sort_unstable();
    let train = pool
        .into_iter()
        .filter(|i| validation.binary_search(i).is_err())
        .collect();
    Ok(TemporalSplit {
        plan: SplitPlan {
            train,
            validation,
            test,
            protocol: Protocol::Temporal,
            repetition: 0,
        },
        excluded,
        train_fraction,
        test_fraction,
    })
}
