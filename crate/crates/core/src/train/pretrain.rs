//! Backbone pre-training: plain mini-batch classification over the training
//! split's classes with a temporary linear head, discarded afterwards.

use crate::autodiff::{Rng, Tape};
use crate::cplae::Model;
use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::nn::{Adam, Linear, Optimizer, ParamId};
use crate::seeds::TAG_PRETRAIN;
use serde::{Deserialize, Serialize};

/// Pre-training budget. The defaults are a desk-scale recipe: 30 epochs of
/// batch-64 Adam at 1e-3.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "pretrain epochs must be positive and batch_size at least 2".into(),
            ));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "pretrain lr must be finite and positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Name prefix of the temporary classification head; parameters under it are
/// excluded from meta-training and from checkpoints.
pub const PRETRAIN_HEAD_PREFIX: &str = "pretrain_head.";

/// Train the backbone as an ordinary classifier over all training-split
/// classes. Returns the final top-1 accuracy on that split (evaluated with
/// running statistics). The head's parameters remain registered under
/// `pretrain_head.` but play no further role.
pub fn pretrain_backbone(
    model: &mut Model,
    dataset: &LabeledDataset,
    config: &PretrainConfig,
    seed: u64,
) -> Result<f64> {
    config.validate()?;
    let classes = dataset.split_classes(Split::Train);
    if classes.len() < 2 {
        return Err(Error::Sampling(format!(
            "pre-training needs at least 2 training-split classes, found {}",
            classes.len()
        )));
    }
    // Dense head label for each training class id.
    let mut class_pos = vec![usize::MAX; dataset.class_count()];
    for (pos, &c) in classes.iter().enumerate() {
        class_pos[c] = pos;
    }
    let pool: Vec<usize> = classes
        .iter()
        .flat_map(|&c| dataset.class_samples(c).iter().cloned())
        .collect();
    if pool.len() < config.batch_size.min(2) {
        return Err(Error::Sampling(format!(
            "pre-training pool holds {} samples, need at least {}",
            pool.len(),
            config.batch_size.min(2)
        )));
    }

    let dim = model.config.backbone.embedding_dim();
    let mut init_rng = Rng::derive(seed, TAG_PRETRAIN, u64::MAX);
    let head = Linear::new(
        &mut model.store,
        &mut init_rng,
        "pretrain_head.linear",
        dim,
        classes.len(),
    )?;
    let group: Vec<ParamId> = model
        .store
        .ids()
        .filter(|&id| {
            model.store.is_trainable(id)
                && (model.store.name(id).starts_with("backbone.")
                    || model.store.name(id).starts_with(PRETRAIN_HEAD_PREFIX))
        })
        .collect();
    let mut optimizer = Optimizer::Adam(Adam::new(config.lr, 0.9, 0.999, 1e-8, 0.0));

    // Whole batches only: a trailing remnant of 1 sample would starve
    // batchnorm of variance. With a pool smaller than one batch, train on
    // the whole pool each step.
    let batch = config.batch_size.min(pool.len());
    let batches_per_epoch = pool.len() / batch;

    let mut store = std::mem::take(&mut model.store);
    let result = (|| -> Result<()> {
        for epoch in 0..config.epochs {
            let mut order = pool.clone();
            Rng::derive(seed, TAG_PRETRAIN, epoch as u64).shuffle(&mut order);
            for b in 0..batches_per_epoch {
                let ids = &order[b * batch..(b + 1) * batch];
                let labels: Vec<usize> = ids.iter().map(|&i| class_pos[dataset.label(i)]).collect();
                let mut tape = Tape::<f32>::new();
                let mounted = store.mount(&mut tape);
                let images = tape.constant(dataset.stack(ids));
                let embedded = model
                    .backbone
                    .forward_train(&mut tape, &mut store, &mounted, images)?;
                let logits = head.forward(&mut tape, &mounted, embedded)?;
                let logp = tape.log_softmax(logits, 1)?;
                let flat = tape.reshape(logp, vec![batch * classes.len()])?;
                let picks: Vec<usize> = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| i * classes.len() + l)
                    .collect();
                let chosen = tape.index_select(flat, 0, &picks)?;
                let mean = tape.mean(chosen, &[], false)?;
                let loss = tape.mul_scalar(mean, -1.0)?;
                let value = tape.item(loss)?;
                if !value.is_finite() {
                    return Err(Error::Domain(format!(
                        "non-finite pre-training loss at epoch {epoch} batch {b} (seed {seed})"
                    )));
                }
                tape.backward(loss)?;
                optimizer.step(&mut store, &tape, &mounted, &group)?;
            }
        }
        Ok(())
    })();
    model.store = store;
    result?;

    // Final train-split top-1 accuracy, eval mode.
    let mut correct = 0usize;
    for chunk in pool.chunks(config.batch_size) {
        let mut tape = Tape::<f32>::new();
        let mounted = model.store.mount(&mut tape);
        let images = tape.constant(dataset.stack(chunk));
        let embedded = model.backbone.forward_eval(&mut tape, &mounted, images)?;
        let logits = head.forward(&mut tape, &mounted, embedded)?;
        let values = tape.value(logits);
        for (row, &id) in chunk.iter().enumerate() {
            let scores = &values.data()[row * classes.len()..(row + 1) * classes.len()];
            let argmax = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("non-empty class list");
            if argmax == class_pos[dataset.label(id)] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / pool.len() as f64)
}
