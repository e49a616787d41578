//! Bag-level malware classification over precomputed instance embeddings.
//!
//! A learnable category vector is prepended to each bag, the sequence runs
//! through pre-norm Nyström attention blocks, and the category row is read
//! out into a single logit. Aggregation baselines, the training loop,
//! split protocols and independent verification oracles live alongside.
//!
//! All randomness comes from ChaCha8 streams keyed by `(seed, label,
//! index)`; see [`rng`].

pub mod attention;
pub mod baselines;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod error;
pub mod fixtures;
pub mod model;
pub mod numerics;
pub mod par;
pub mod rng;
pub mod training;
pub mod verify;

pub use attention::{AttentionConfig, AttentionParams};
pub use baselines::{BaselineKind, BaselineParams};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use classifier::{Classifier, ModelKind};
pub use data::{Dataset, DatasetManifest, SynthConfig};
pub use error::{Error, FormatError, Result};
pub use model::{Bag, ModelConfig, ModelParams};
pub use numerics::DenseMatrix;
pub use training::{Metrics, TrainConfig};
