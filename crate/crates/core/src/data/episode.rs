//! n-way k-shot episode sampling.
//!
//! An episode draws n classes from one split uniformly without replacement,
//! then k+q distinct samples per class (first k become support, the rest
//! queries). Support and query sets are therefore disjoint by sample id and
//! class-balanced by construction. Within the episode, samples are stored
//! class-major in class draw order, which fixes the prototype ordering
//! downstream.

use super::augment::AugmentationKind;
use super::dataset::{LabeledDataset, Split};
use crate::autodiff::Rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    /// Ordered augmentations appended to the original view (2–4 entries, no
    /// duplicates). The default triple is hflip, vflip, rot270.
    pub augmentations: Vec<AugmentationKind>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n_way: 5,
            k_shot: 5,
            q_queries: 15,
            augmentations: vec![
                AugmentationKind::Hflip,
                AugmentationKind::Vflip,
                AugmentationKind::Rot270,
            ],
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config(format!(
                "n_way must be at least 2, got {}",
                self.n_way
            )));
        }
        if self.k_shot < 1 {
            return Err(Error::Config("k_shot must be at least 1".into()));
        }
        if self.q_queries < 1 {
            return Err(Error::Config("q_queries must be at least 1".into()));
        }
        if !(2..=4).contains(&self.augmentations.len()) {
            return Err(Error::Config(format!(
                "augmentation list must hold 2–4 entries, got {}",
                self.augmentations.len()
            )));
        }
        for (i, a) in self.augmentations.iter().enumerate() {
            if self.augmentations[..i].contains(a) {
                return Err(Error::Config(format!(
                    "duplicate augmentation '{}'",
                    a.name()
                )));
            }
        }
        Ok(())
    }

    /// Views per image: the original plus each augmentation.
    pub fn view_count(&self) -> usize {
        1 + self.augmentations.len()
    }
}

/// One sampled episode. Sample ids index into the dataset; both id lists
/// are class-major (all of class 0's samples, then class 1's, …) in the
/// order classes were drawn.
#[derive(Debug, Clone)]
pub struct Episode {
    /// Dataset class ids in draw order; episode-local label = position.
    pub classes: Vec<usize>,
    /// n·k support sample ids, class-major.
    pub support_ids: Vec<usize>,
    /// n·q query sample ids, class-major.
    pub query_ids: Vec<usize>,
    pub k_shot: usize,
    pub q_queries: usize,
}

impl Episode {
    /// Episode-local labels (0..n) for the support set, class-major.
    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.classes.len())
            .flat_map(|c| std::iter::repeat_n(c, self.k_shot))
            .collect()
    }

    /// Episode-local labels (0..n) for the query set, class-major.
    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.classes.len())
            .flat_map(|c| std::iter::repeat_n(c, self.q_queries))
            .collect()
    }
}

/// Draw one episode from `split`. Deterministic given the rng state.
pub fn sample_episode(
    dataset: &LabeledDataset,
    split: Split,
    config: &EpisodeConfig,
    rng: &mut Rng,
) -> Result<Episode> {
    config.validate()?;
    let classes_in_split = dataset.split_classes(split);
    if classes_in_split.len() < config.n_way {
        return Err(Error::Sampling(format!(
            "split '{}' holds {} classes, need {} for {}-way episodes",
            split.name(),
            classes_in_split.len(),
            config.n_way,
            config.n_way
        )));
    }
    let picked = rng.sample_without_replacement(classes_in_split.len(), config.n_way);
    let classes: Vec<usize> = picked.iter().map(|&i| classes_in_split[i]).collect();
    let per_class = config.k_shot + config.q_queries;
    let mut support_ids = Vec::with_capacity(config.n_way * config.k_shot);
    let mut query_ids = Vec::with_capacity(config.n_way * config.q_queries);
    for &class in &classes {
        let pool = dataset.class_samples(class);
        if pool.len() < per_class {
            return Err(Error::Sampling(format!(
                "class '{}' holds {} samples, need k+q = {per_class}",
                dataset.class_name(class),
                pool.len()
            )));
        }
        let drawn = rng.sample_without_replacement(pool.len(), per_class);
        for (i, &idx) in drawn.iter().enumerate() {
            if i < config.k_shot {
                support_ids.push(pool[idx]);
            } else {
                query_ids.push(pool[idx]);
            }
        }
    }
    Ok(Episode {
        classes,
        support_ids,
        query_ids,
        k_shot: config.k_shot,
        q_queries: config.q_queries,
    })
}
