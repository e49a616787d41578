//! The attention-pooling MIL head.
//!
//! A learnable category vector is prepended to the bag's instance
//! embeddings (no positional signal), the sequence passes through a stack
//! of pre-norm residual Nyström attention blocks, and row 0 of the result
//! is normalized and mapped to a single logit.

use chrono::NaiveDate;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::attention::{multi_head_nystrom_on, AttentionConfig, AttentionParams, AttentionVars};
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, Tape, Var};
use crate::rng::{rng_for, Rng};
use crate::training::loss::{bce_loss, logistic};

pub const DEFAULT_NUM_BLOCKS: usize = 2;
pub const DEFAULT_WEIGHT_STD: f64 = 0.02;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One app: a variable-size set of frozen instance embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub app_id: String,
    /// 1 = malware, 0 = benign.
    pub label: u8,
    pub date: NaiveDate,
    /// `n x d`, one row per instance.
    pub embeddings: DenseMatrix,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub num_blocks: usize,
    pub attention: AttentionConfig,
    /// Hidden widths of the readout MLP; empty means a single linear layer.
    pub readout_hidden: Vec<usize>,
    /// Standard deviation of the category vector at initialization.
    pub category_scale: f64,
    pub weight_std: f64,
}

impl ModelConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            num_blocks: DEFAULT_NUM_BLOCKS,
            attention: AttentionConfig::default(),
            readout_hidden: Vec::new(),
            category_scale: 1.0,
            weight_std: DEFAULT_WEIGHT_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::arg("num_blocks must be at least 1"));
        }
        if self.readout_hidden.contains(&0) {
            return Err(Error::arg("readout hidden widths must be positive"));
        }
        self.attention.validate(self.d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln_gamma: DenseMatrix,
    pub ln_beta: DenseMatrix,
    pub attention: AttentionParams,
}

/// Fully connected layer `x·W + b` followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d: usize,
    /// `1 x d`
    pub category_vector: DenseMatrix,
    pub blocks: Vec<BlockParams>,
    pub final_ln_gamma: DenseMatrix,
    pub final_ln_beta: DenseMatrix,
    pub readout_hidden: Vec<DenseLayer>,
    /// `h x 1`, where `h` is the last hidden width (or `d`).
    pub head_weights: DenseMatrix,
    /// `1 x 1`
    pub head_bias: DenseMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub label: u8,
}

/// Loss, logit and per-tensor gradients (in [`ModelParams::tensors`] order).
#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub logit: f64,
    pub grads: Vec<DenseMatrix>,
}

fn normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Deterministic initialization: category vector `N(0, category_scale²)`,
/// projections `N(0, weight_std²)`, norms at identity, zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let d = config.d;
    let std = config.weight_std;
    let mut rng = rng_for(seed, "model-init", 0);
    let category_vector = normal(&mut rng, 1, d, config.category_scale);
    let blocks = (0..config.num_blocks)
        .map(|_| BlockParams {
            ln_gamma: DenseMatrix::filled(1, d, 1.0),
            ln_beta: DenseMatrix::zeros(1, d),
            attention: AttentionParams {
                w_q: normal(&mut rng, d, d, std),
                w_k: normal(&mut rng, d, d, std),
                w_v: normal(&mut rng, d, d, std),
                w_o: normal(&mut rng, d, d, std),
                config: config.attention,
            },
        })
        .collect();
    let mut width = d;
    let readout_hidden = config
        .readout_hidden
        .iter()
        .map(|&h| {
            let layer = DenseLayer {
                weight: normal(&mut rng, width, h, std),
                bias: DenseMatrix::zeros(1, h),
            };
            width = h;
            layer
        })
        .collect();
    Ok(ModelParams {
        d,
        category_vector,
        blocks,
        final_ln_gamma: DenseMatrix::filled(1, d, 1.0),
        final_ln_beta: DenseMatrix::zeros(1, d),
        readout_hidden,
        head_weights: normal(&mut rng, width, 1, std),
        head_bias: DenseMatrix::zeros(1, 1),
    })
}

impl ModelParams {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn attention_config(&self) -> AttentionConfig {
        self.blocks
            .first()
            .map(|b| b.attention.config)
            .unwrap_or_default()
    }

    /// Architecture with which these parameters were built.
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            num_blocks: self.blocks.len(),
            attention: self.attention_config(),
            readout_hidden: self.readout_hidden.iter().map(|l| l.bias.cols()).collect(),
            category_scale: 1.0,
            weight_std: DEFAULT_WEIGHT_STD,
        }
    }

    /// Zero-valued parameters with the given architecture.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut p = init_params(config, 0)?;
        p.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
        Ok(p)
    }

    /// Every trainable tensor with its stable checkpoint name.
    pub fn tensors(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out = vec![("category_vector".to_owned(), &self.category_vector)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln_gamma"), &b.ln_gamma));
            out.push((format!("blocks.{i}.ln_beta"), &b.ln_beta));
            out.push((format!("blocks.{i}.attn.w_q"), &b.attention.w_q));
            out.push((format!("blocks.{i}.attn.w_k"), &b.attention.w_k));
            out.push((format!("blocks.{i}.attn.w_v"), &b.attention.w_v));
            out.push((format!("blocks.{i}.attn.w_o"), &b.attention.w_o));
        }
        out.push(("final_ln_gamma".to_owned(), &self.final_ln_gamma));
        out.push(("final_ln_beta".to_owned(), &self.final_ln_beta));
        for (i, l) in self.readout_hidden.iter().enumerate() {
            out.push((format!("readout.{i}.weight"), &l.weight));
            out.push((format!("readout.{i}.bias"), &l.bias));
        }
        out.push(("head_weights".to_owned(), &self.head_weights));
        out.push(("head_bias".to_owned(), &self.head_bias));
        out
    }

    /// Same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = vec![&mut self.category_vector];
        for b in &mut self.blocks {
            out.push(&mut b.ln_gamma);
            out.push(&mut b.ln_beta);
            out.push(&mut b.attention.w_q);
            out.push(&mut b.attention.w_k);
            out.push(&mut b.attention.w_v);
            out.push(&mut b.attention.w_o);
        }
        out.push(&mut self.final_ln_gamma);
        out.push(&mut self.final_ln_beta);
        for l in &mut self.readout_hidden {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head_weights);
        out.push(&mut self.head_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Records the forward pass on `tape`. Returns the logit node and the
    /// parameter leaves in [`Self::tensors`] order.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        embeddings: &DenseMatrix,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        if embeddings.cols() != self.d {
            return Err(Error::shape(
                "forward (bag width vs model width)",
                embeddings.shape(),
                (embeddings.rows(), self.d),
            ));
        }
        if embeddings.rows() == 0 {
            return Err(Error::arg("bag has no instances"));
        }
        let leaves: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("leaf count matches tensors()");

        let category = next();
        let instances = tape.constant(embeddings.clone());
        let mut x = tape.concat_rows(&[category, instances])?;
        for block in &self.blocks {
            let (gamma, beta) = (next(), next());
            let w = AttentionVars {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
            };
            let normed = tape.layer_norm(x, gamma, beta)?;
            let attended = multi_head_nystrom_on(tape, normed, w, &block.attention.config)?;
            x = tape.add(attended, x)?;
        }
        let (gamma, beta) = (next(), next());
        let first = tape.slice_rows(x, 0, 1)?;
        let mut h = tape.layer_norm(first, gamma, beta)?;
        for _ in &self.readout_hidden {
            let (w, b) = (next(), next());
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = tape.relu(z);
        }
        let (w, b) = (next(), next());
        let z = tape.matmul(h, w)?;
        let logit = tape.add(z, b)?;
        Ok((logit, leaves))
    }

    pub fn forward(&self, bag: &Bag) -> Result<f64> {
        let mut tape = Tape::new();
        let (logit, _) = self.forward_on(&mut tape, &bag.embeddings, false)?;
        Ok(tape.value(logit).get(0, 0))
    }

    pub fn predict(&self, bag: &Bag, threshold: f64) -> Result<Prediction> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::arg(format!("threshold {threshold} outside (0, 1)")));
        }
        Ok(prediction_from_logit(self.forward(bag)?, threshold))
    }

    /// Binary cross-entropy of the bag label and its gradient with respect
    /// to every parameter tensor.
    pub fn loss_and_grads(&self, bag: &Bag) -> Result<LossAndGrads> {
        let mut tape = Tape::new();
        let (logit_var, leaves) = self.forward_on(&mut tape, &bag.embeddings, true)?;
        let logit = tape.value(logit_var).get(0, 0);
        let (loss, dlogit) = bce_loss(logit, bag.label);
        let mut grads = tape.backward_with(logit_var, DenseMatrix::filled(1, 1, dlogit))?;
        let grads = leaves
            .iter()
            .map(|&v| {
                grads.take(v).unwrap_or_else(|| {
                    let (r, c) = tape.value(v).shape();
                    DenseMatrix::zeros(r, c)
                })
            })
            .collect();
        Ok(LossAndGrads { loss, logit, grads })
    }
}

/// Score is the logistic of the logit; ties at the threshold are malware.
pub fn prediction_from_logit(logit: f64, threshold: f64) -> Prediction {
    let score = logistic(logit);
    Prediction {
        score,
        label: u8::from(score >= threshold),
    }
}
