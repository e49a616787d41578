//! Epoch loop, evaluation and model selection.

use log::{debug, info};
use rand::seq::SliceRandom;

use super::metrics::{compute_metrics, Metrics};
use super::optim::{Adam, AdamConfig, Lookahead, Optimizer};
use crate::attention::AttentionConfig;
use crate::classifier::{Classifier, ModelKind};
use crate::error::{Error, Result};
use crate::model::{prediction_from_logit, Bag, ModelConfig, DEFAULT_NUM_BLOCKS, DEFAULT_THRESHOLD, DEFAULT_WEIGHT_STD};
use crate::numerics::DenseMatrix;
use crate::par;
use crate::rng::{derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub threshold: f64,
    pub num_blocks: usize,
    pub attention: AttentionConfig,
    pub readout_hidden: Vec<usize>,
    pub category_scale: f64,
    pub weight_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Cmil,
            learning_rate: 1e-4,
            epochs: 20,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            adam: AdamConfig::default(),
            batch_size: 1,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            num_blocks: DEFAULT_NUM_BLOCKS,
            attention: AttentionConfig::default(),
            readout_hidden: Vec::new(),
            category_scale: 1.0,
            weight_std: DEFAULT_WEIGHT_STD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be at least 1"));
        }
        if self.lookahead_k == 0 {
            return Err(Error::arg("lookahead_k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lookahead_alpha) {
            return Err(Error::arg(format!("lookahead_alpha {} outside [0, 1]", self.lookahead_alpha)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::arg(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(Error::arg("adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }

    pub fn model_config(&self, d: usize) -> ModelConfig {
        ModelConfig {
            d,
            num_blocks: self.num_blocks,
            attention: self.attention,
            readout_hidden: self.readout_hidden.clone(),
            category_scale: self.category_scale,
            weight_std: self.weight_std,
        }
    }

    pub fn optimizer(&self) -> Result<Lookahead<Adam>> {
        Lookahead::new(Adam::new(self.adam), self.lookahead_k, self.lookahead_alpha)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Option<Metrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Classifier,
    /// 1-based epoch the returned parameters come from.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppScore {
    pub app_id: String,
    pub score: f64,
    pub label: u8,
    pub prediction: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Sorted by app id.
    pub scores: Vec<AppScore>,
    pub metrics: Metrics,
}

fn common_width(bags: &[&Bag]) -> Result<usize> {
    let d = bags.first().map(|b| b.width()).ok_or_else(|| Error::arg("empty training split"))?;
    if let Some(b) = bags.iter().find(|b| b.width() != d) {
        return Err(Error::shape("training bag width", b.embeddings.shape(), (b.len(), d)));
    }
    Ok(d)
}

/// One optimizer step on the mean gradient of `batch`.
fn batch_step<O: Optimizer>(
    model: &mut Classifier,
    opt: &mut O,
    batch: &[&Bag],
    epoch_seed: u64,
    lr: f64,
    epoch: usize,
) -> Result<f64> {
    let snapshot = &*model;
    let results = par::try_map_indexed(batch.len(), |i| snapshot.loss_and_grads(batch[i], epoch_seed))?;
    let mut total_loss = 0.0;
    let mut sum: Option<Vec<DenseMatrix>> = None;
    for ((loss, _, grads), bag) in results.into_iter().zip(batch) {
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                app_id: bag.app_id.clone(),
                loss,
            });
        }
        total_loss += loss;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g)?;
                }
            }
        }
    }
    let mut grads = sum.expect("non-empty batch");
    if batch.len() > 1 {
        let inv = 1.0 / batch.len() as f64;
        grads.iter_mut().for_each(|g| *g = g.scale(inv));
    }
    opt.step(&mut model.tensors_mut(), &grads, lr)?;
    Ok(total_loss)
}

/// Trains a fresh classifier and returns the parameters with the best
/// validation F1 (earliest epoch on ties; last epoch without validation).
/// Bag embeddings are read-only inputs throughout.
pub fn train(config: &TrainConfig, train_bags: &[&Bag], validation: &[&Bag]) -> Result<TrainOutcome> {
    config.validate()?;
    let d = common_width(train_bags)?;
    let mut model = Classifier::init(config.model, &config.model_config(d), derive_seed(config.seed, "init", 0))?;
    let mut opt = config.optimizer()?;
    train_from(config, &mut model, &mut opt, train_bags, validation)
}

/// Continues training `model` with an existing optimizer state.
pub fn train_from<O: Optimizer>(
    config: &TrainConfig,
    model: &mut Classifier,
    opt: &mut O,
    train_bags: &[&Bag],
    validation: &[&Bag],
) -> Result<TrainOutcome> {
    config.validate()?;
    common_width(train_bags)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(Classifier, usize, f64)> = None;
    let mut order: Vec<usize> = (0..train_bags.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng_for(config.seed, "epoch-order", epoch as u64));
        let epoch_seed = derive_seed(config.seed, "random-selection", epoch as u64);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Bag> = chunk.iter().map(|&i| train_bags[i]).collect();
            loss_sum += batch_step(model, opt, &batch, epoch_seed, config.learning_rate, epoch)?;
        }
        let train_loss = loss_sum / train_bags.len() as f64;
        let val = if validation.is_empty() {
            None
        } else {
            Some(evaluate(model, validation, config.threshold)?.metrics)
        };
        match &val {
            Some(m) => info!(
                "{} epoch {epoch}: loss {train_loss:.4} val f1 {:.4} acc {:.4}",
                config.model, m.f1, m.accuracy
            ),
            None => info!("{} epoch {epoch}: loss {train_loss:.4}", config.model),
        }
        let score = val.map_or(f64::INFINITY, |m| m.f1);
        let improved = match &best {
            None => true,
            Some((_, _, f)) => score > *f || val.is_none(),
        };
        if improved {
            debug!("new best at epoch {epoch}");
            best = Some((model.clone(), epoch, score));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation: val,
        });
    }
    let (best, best_epoch, _) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}

/// Scores every bag (in parallel when enabled), orders the per-app
/// records by app id and aggregates metrics.
pub fn evaluate(model: &Classifier, bags: &[&Bag], threshold: f64) -> Result<Evaluation> {
    if bags.is_empty() {
        return Err(Error::arg("cannot evaluate an empty split"));
    }
    let mut scores = par::try_map_indexed(bags.len(), |i| {
        let bag = bags[i];
        let p = prediction_from_logit(model.logit(bag)?, threshold);
        Ok::<_, Error>(AppScore {
            app_id: bag.app_id.clone(),
            score: p.score,
            label: bag.label,
            prediction: p.label,
        })
    })?;
    scores.sort_by(|a, b| a.app_id.cmp(&b.app_id));
    let preds: Vec<u8> = scores.iter().map(|s| s.prediction).collect();
    let labels: Vec<u8> = scores.iter().map(|s| s.label).collect();
    let metrics = compute_metrics(&preds, &labels)?;
    Ok(Evaluation { scores, metrics })
}
