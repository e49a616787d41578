//! On-disk bag files, dataset manifests, synthetic bag generation.

pub mod bagfile;
mod dataset;
pub mod manifest;
pub mod stats;
pub mod synth;

pub use bagfile::{read_bag, write_bag};
pub use dataset::Dataset;
pub use manifest::{load_manifest, parse_manifest, save_manifest, DatasetManifest, ManifestRecord};
pub use stats::{dataset_stats, DatasetStats};
pub use synth::{gen_synthetic, generate_bags, SynthBag, SynthConfig};
