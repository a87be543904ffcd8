//! Dataset ingestion (netpbm images + JSON-lines manifests), the synthetic
//! corpus generator, deterministic augmentations, and episode sampling.

pub mod augment;
pub mod dataset;
pub mod episode;
pub mod netpbm;
pub mod synth;

pub use augment::{augment, AugmentationKind};
pub use dataset::{load_dataset, write_dataset, LabeledDataset, Split};
pub use episode::{sample_episode, Episode, EpisodeConfig};
pub use synth::{synth_generate, MAX_CLASSES};
