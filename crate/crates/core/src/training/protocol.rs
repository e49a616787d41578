//! Whole-protocol runs: train on a plan's training split, select on its
//! validation split, score its test split.

use log::info;

use super::metrics::{mean_metrics, MeanMetrics};
use super::split::{split_shuffled, split_temporal, SplitPlan, TemporalSplit};
use super::trainer::{evaluate, train, Evaluation, TrainConfig, TrainOutcome};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const DEFAULT_REPETITIONS: u64 = 10;

#[derive(Debug, Clone)]
pub struct RunResult {
    pub plan: SplitPlan,
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
}

pub fn run_plan(config: &TrainConfig, dataset: &Dataset, plan: &SplitPlan) -> Result<RunResult> {
    if plan.test.is_empty() {
        return Err(Error::arg("split has an empty test set"));
    }
    if let Some(&bad) = plan.train.iter().chain(&plan.validation).chain(&plan.test).find(|&&i| i >= dataset.len()) {
        return Err(Error::arg(format!("split index {bad} outside dataset of {}", dataset.len())));
    }
    let outcome = train(config, &dataset.subset(&plan.train), &dataset.subset(&plan.validation))?;
    let evaluation = evaluate(&outcome.best, &dataset.subset(&plan.test), config.threshold)?;
    Ok(RunResult {
        plan: plan.clone(),
        outcome,
        evaluation,
    })
}

#[derive(Debug, Clone)]
pub struct ShuffledReport {
    pub runs: Vec<RunResult>,
    pub mean: MeanMetrics,
}

/// Repetitions `1..=repetitions`, each with its own split and a training
/// seed derived from the top-level seed.
pub fn run_shuffled(config: &TrainConfig, dataset: &Dataset, repetitions: u64) -> Result<ShuffledReport> {
    if repetitions == 0 {
        return Err(Error::arg("repetitions must be at least 1"));
    }
    let mut runs = Vec::new();
    for rep in 1..=repetitions {
        let plan = split_shuffled(&dataset.manifest, config.seed, rep)?;
        let cfg = TrainConfig {
            seed: derive_seed(config.seed, "repetition", rep),
            ..config.clone()
        };
        let run = run_plan(&cfg, dataset, &plan)?;
        info!("repetition {rep}: test f1 {:.4}", run.evaluation.metrics.f1);
        runs.push(run);
    }
    let metrics: Vec<_> = runs.iter().map(|r| r.evaluation.metrics).collect();
    let mean = mean_metrics(&metrics)?;
    Ok(ShuffledReport { runs, mean })
}

#[derive(Debug, Clone)]
pub struct TemporalReport {
    pub split: TemporalSplit,
    pub run: RunResult,
}

pub fn run_temporal(config: &TrainConfig, dataset: &Dataset) -> Result<TemporalReport> {
    let split = split_temporal(&dataset.manifest)?;
    let run = run_plan(config, dataset, &split.plan)?;
    Ok(TemporalReport { split, run })
}
