//! Synthetic data, image files, manifests and evaluation metrics.

pub mod manifest;
pub mod metrics;
pub mod pnm;
pub mod synth;

pub use manifest::{load_pair, read_manifest, write_split, ManifestEntry, PairData};
pub use metrics::{binarize, confusion, metrics, Confusion, MetricsReport};
pub use pnm::{read_image, write_image};
pub use synth::{generate_dataset, generate_pair, GenConfig, ImagePairSample};
