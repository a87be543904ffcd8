//! Stream tags for deriving purpose-specific RNGs from a master seed.
//!
//! Every random decision in the system draws from `Rng::derive(master, tag,
//! index)` with a tag from this table, so that independent concerns (weight
//! init, episode sampling, negative sampling, synthesis) never share a
//! stream and any single decision can be replayed in isolation.

/// Parameter initialization stream.
pub const TAG_INIT: u64 = 0x01;
/// Pretraining batch shuffling; index = epoch.
pub const TAG_PRETRAIN: u64 = 0x02;
/// Meta-training episodes; index = global episode counter.
pub const TAG_EPISODE_TRAIN: u64 = 0x03;
/// Validation episodes; index = position in the fixed validation set.
pub const TAG_EPISODE_VAL: u64 = 0x04;
/// Meta-test episodes; index = episode number.
pub const TAG_EPISODE_TEST: u64 = 0x05;
/// Contrastive negative sampling; index = global episode counter.
pub const TAG_NEG: u64 = 0x06;
/// Synthetic class parameters; index = class id.
pub const TAG_SYNTH_CLASS: u64 = 0x07;
/// Synthetic per-sample parameters; index = class id · per_class + sample.
pub const TAG_SYNTH_SAMPLE: u64 = 0x08;
/// Assignment of classes to synthetic feature combinations.
pub const TAG_SYNTH_GRID: u64 = 0x09;
