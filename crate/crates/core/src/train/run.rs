//! The episodic training loop: per-episode steps, per-epoch validation,
//! best-by-validation model selection, and run artifacts (CSV log, JSON
//! summary, checkpoint).

use super::pretrain::{pretrain_backbone, PRETRAIN_HEAD_PREFIX};
use super::TrainConfig;
use crate::autodiff::{Rng, Tape};
use crate::cplae::{episode_loss, evaluate_episode, prepare_views, LossBreakdown, Model};
use crate::data::{sample_episode, AugmentationKind, Episode, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::{Optimizer, ParamId, ParamStore};
use crate::seeds::{TAG_EPISODE_TRAIN, TAG_EPISODE_VAL, TAG_INIT, TAG_NEG};
use serde::Serialize;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

/// One meta-training step: Algorithm body — build the per-view batches,
/// compute the combined loss, backpropagate, and apply the optimizer to
/// `group`. Returns the loss breakdown from before the parameter update.
pub fn train_step(
    model: &mut Model,
    dataset: &LabeledDataset,
    episode: &Episode,
    augmentations: &[AugmentationKind],
    optimizer: &mut Optimizer<f32>,
    group: &[ParamId],
    neg_rng: &mut Rng,
) -> Result<LossBreakdown> {
    let views = prepare_views(dataset, episode, augmentations)?;
    let mut store = std::mem::take(&mut model.store);
    let mut tape = Tape::<f32>::new();
    let mounted = store.mount(&mut tape);
    let result = episode_loss(model, &mut tape, Some(&mut store), &mounted, &views, neg_rng);
    model.store = store;
    let (loss, breakdown) = result?;
    if !breakdown.l_total.is_finite() {
        return Err(Error::Domain(format!(
            "non-finite loss (l_fsl={}, l_cpl={}) on episode with classes {:?}",
            breakdown.l_fsl, breakdown.l_cpl, episode.classes
        )));
    }
    tape.backward(loss)?;
    optimizer.step(&mut model.store, &tape, &mounted, group)?;
    Ok(breakdown)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeRecord {
    pub epoch: usize,
    /// Monotone global episode counter.
    pub episode: usize,
    pub l_fsl: f64,
    pub l_cpl: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_l_fsl: f64,
    pub mean_l_cpl: f64,
    pub mean_l_total: f64,
    pub val_accuracy: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunLog {
    pub episodes: Vec<EpisodeRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose validation accuracy selected the returned model.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub total_wall_secs: f64,
}

impl RunLog {
    /// Render the per-episode log as CSV. The first line echoes the full
    /// effective configuration; `val_acc` is filled on each epoch's final
    /// episode row, where validation ran.
    pub fn to_csv(&self, config: &TrainConfig) -> Result<String> {
        let echo = serde_json::to_string(config)
            .map_err(|e| Error::Config(format!("config not serializable: {e}")))?;
        let mut out = String::new();
        out.push_str(&format!("# config {echo}\n"));
        out.push_str("epoch,episode,l_fsl,l_cpl,l_total,val_acc\n");
        let mut epoch_iter = self.epochs.iter().peekable();
        for (i, r) in self.episodes.iter().enumerate() {
            let last_of_epoch = self
                .episodes
                .get(i + 1)
                .is_none_or(|next| next.epoch != r.epoch);
            let val = if last_of_epoch {
                let e = epoch_iter.next().expect("one epoch record per epoch");
                debug_assert_eq!(e.epoch, r.epoch);
                format!("{}", e.val_accuracy)
            } else {
                String::new()
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.episode, r.l_fsl, r.l_cpl, r.l_total, val
            ));
        }
        Ok(out)
    }
}

pub struct TrainOutput {
    /// The model with the best-by-validation parameters restored.
    pub model: Model,
    pub log: RunLog,
    /// Accuracy reported by pre-training, when it ran.
    pub pretrain_accuracy: Option<f64>,
}

/// Mean accuracy over the seeded validation episode set. The same episodes
/// (derived from the run seed alone) recur every epoch, so scores across
/// epochs are directly comparable.
pub fn validation_accuracy(
    model: &Model,
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<f64> {
    let augs = view_augmentations(model, config);
    let mut sum = 0.0;
    for i in 0..config.val_episodes {
        let mut rng = Rng::derive(config.seed, TAG_EPISODE_VAL, i as u64);
        let episode = sample_episode(dataset, Split::Val, &config.episode, &mut rng)?;
        let views = prepare_views(dataset, &episode, augs)?;
        sum += evaluate_episode(model, &views)?.accuracy;
    }
    Ok(sum / config.val_episodes.max(1) as f64)
}

/// The slice of the episode's augmentation list this model consumes.
pub fn view_augmentations<'a>(model: &Model, config: &'a TrainConfig) -> &'a [AugmentationKind] {
    &config.episode.augmentations[..model.config.views - 1]
}

/// Run the full meta-training loop. When `out_dir` is given, writes
/// `runlog.csv`, `summary.json`, and `best.ckpt` (pre-training head
/// excluded) into it.
pub fn run_training(
    dataset: &LabeledDataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    run_training_warm(dataset, config, out_dir, None)
}

/// Copy every `backbone.*` entry (weights and batchnorm statistics) from
/// `src` into `dst`. Entries missing from `dst` are an error.
pub fn copy_backbone(src: &ParamStore<f32>, dst: &mut ParamStore<f32>) -> Result<()> {
    for id in src.ids() {
        let name = src.name(id);
        if !name.starts_with("backbone.") {
            continue;
        }
        let target = dst.lookup(name).ok_or_else(|| {
            Error::Contract(format!("warm start: parameter {name} missing from target model"))
        })?;
        dst.set(target, src.get(id).clone())?;
    }
    Ok(())
}

/// [`run_training`] with an optional warm start: when `backbone_init` is
/// given, its `backbone.*` entries replace the seeded initialization and
/// the config's own pre-training stage is skipped (the caller already did
/// it — this is how the ablation runner shares one pre-trained backbone
/// across presets).
pub fn run_training_warm(
    dataset: &LabeledDataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    backbone_init: Option<&ParamStore<f32>>,
) -> Result<TrainOutput> {
    run_training_observed(dataset, config, out_dir, backbone_init, &mut |_| {})
}

/// [`run_training_warm`] with an observer invoked after each epoch's
/// validation pass — the hook for plain-text progress lines.
pub fn run_training_observed(
    dataset: &LabeledDataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    backbone_init: Option<&ParamStore<f32>>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutput> {
    config.validate()?;
    let started = Instant::now();

    let mut init_rng = Rng::derive(config.seed, TAG_INIT, 0);
    let mut model = Model::new(config.effective_model(), &mut init_rng)?;
    let pretrain_accuracy = match (backbone_init, &config.pretrain) {
        (Some(src), _) => {
            copy_backbone(src, &mut model.store)?;
            None
        }
        (None, Some(p)) => Some(pretrain_backbone(&mut model, dataset, p, config.seed)?),
        (None, None) => None,
    };

    let mut optimizer = config.optimizer.build();
    let schedule = config.optimizer.schedule();
    let group = model.meta_param_ids();
    let augs = view_augmentations(&model, config);

    let mut log = RunLog {
        episodes: Vec::with_capacity(config.epochs * config.episodes_per_epoch),
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        total_wall_secs: 0.0,
    };
    let mut best_store: Option<ParamStore<f32>> = None;

    for epoch in 0..config.epochs {
        let epoch_started = Instant::now();
        optimizer.set_lr(schedule.at(epoch));
        let (mut sum_fsl, mut sum_cpl, mut sum_total) = (0.0, 0.0, 0.0);
        for e in 0..config.episodes_per_epoch {
            let global = epoch * config.episodes_per_epoch + e;
            let mut sample_rng = Rng::derive(config.seed, TAG_EPISODE_TRAIN, global as u64);
            let episode = sample_episode(dataset, Split::Train, &config.episode, &mut sample_rng)?;
            let mut neg_rng = Rng::derive(config.seed, TAG_NEG, global as u64);
            let breakdown = train_step(
                &mut model,
                dataset,
                &episode,
                augs,
                &mut optimizer,
                &group,
                &mut neg_rng,
            )
            .map_err(|err| match err {
                Error::Domain(m) => Error::Domain(format!(
                    "epoch {epoch} episode {global} (seed {}): {m}",
                    config.seed
                )),
                other => other,
            })?;
            sum_fsl += breakdown.l_fsl;
            sum_cpl += breakdown.l_cpl;
            sum_total += breakdown.l_total;
            log.episodes.push(EpisodeRecord {
                epoch,
                episode: global,
                l_fsl: breakdown.l_fsl,
                l_cpl: breakdown.l_cpl,
                l_total: breakdown.l_total,
            });
        }
        let val_accuracy = validation_accuracy(&model, dataset, config)?;
        if val_accuracy > log.best_val_accuracy {
            log.best_val_accuracy = val_accuracy;
            log.best_epoch = epoch;
            best_store = Some(model.store.clone());
        }
        let denom = config.episodes_per_epoch as f64;
        log.epochs.push(EpochRecord {
            epoch,
            lr: schedule.at(epoch),
            mean_l_fsl: sum_fsl / denom,
            mean_l_cpl: sum_cpl / denom,
            mean_l_total: sum_total / denom,
            val_accuracy,
            wall_secs: epoch_started.elapsed().as_secs_f64(),
        });
        on_epoch(log.epochs.last().expect("record just pushed"));
    }

    model.store = best_store.expect("at least one epoch ran");
    log.total_wall_secs = started.elapsed().as_secs_f64();

    if let Some(dir) = out_dir {
        write_artifacts(dir, &model, config, &log)?;
    }
    Ok(TrainOutput {
        model,
        log,
        pretrain_accuracy,
    })
}

fn write_artifacts(dir: &Path, model: &Model, config: &TrainConfig, log: &RunLog) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let csv_path = dir.join("runlog.csv");
    let mut csv = std::fs::File::create(&csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    csv.write_all(log.to_csv(config)?.as_bytes())
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    let summary = serde_json::json!({
        "config": config,
        "best_epoch": log.best_epoch,
        "best_val_accuracy": log.best_val_accuracy,
        "epochs": log.epochs,
        "total_wall_secs": log.total_wall_secs,
    });
    let json_path = dir.join("summary.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary).unwrap())
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;

    checkpoint::save_filtered(&model.store, &dir.join("best.ckpt"), |name| {
        !name.starts_with(PRETRAIN_HEAD_PREFIX)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cplae::ModelConfig;
    use crate::data::synth_generate;
    use crate::data::EpisodeConfig;
    use crate::nn::BackboneConfig;

    fn desk_config(preset: super::super::Preset, batchnorm: bool) -> TrainConfig {
        TrainConfig {
            preset,
            epochs: 1,
            episodes_per_epoch: 3,
            val_episodes: 2,
            episode: EpisodeConfig {
                n_way: 3,
                k_shot: 2,
                q_queries: 6,
                ..EpisodeConfig::default()
            },
            model: ModelConfig {
                backbone: BackboneConfig {
                    channels: vec![4, 8],
                    in_channels: 1,
                    in_h: 12,
                    in_w: 12,
                    use_batchnorm: batchnorm,
                    ..BackboneConfig::default()
                },
                views: 4,
                ..ModelConfig::default()
            },
            optimizer: super::super::OptimizerConfig {
                lr: 1e-3,
                ..super::super::OptimizerConfig::default()
            },
            pretrain: None,
            seed: 11,
        }
    }

    fn small_dataset() -> LabeledDataset {
        // 12 classes -> 6 train / 3 val / 3 test; 10 samples per class
        // covers k+q = 8.
        synth_generate(12, 10, 12, 21).unwrap()
    }

    #[test]
    fn one_epoch_one_episode_emits_one_breakdown() {
        let ds = small_dataset();
        let mut config = desk_config(super::super::Preset::Cplae, true);
        config.epochs = 1;
        config.episodes_per_epoch = 1;
        let out = run_training(&ds, &config, None).unwrap();
        assert_eq!(out.log.episodes.len(), 1);
        assert_eq!(out.log.epochs.len(), 1);
        assert_eq!(out.log.best_epoch, 0);
        assert!(out.pretrain_accuracy.is_none());
    }

    #[test]
    fn lambda_zero_preset_total_equals_fsl() {
        let ds = small_dataset();
        let config = desk_config(super::super::Preset::ProtonetAe, true);
        let out = run_training(&ds, &config, None).unwrap();
        for r in &out.log.episodes {
            assert_eq!(r.l_total, r.l_fsl);
            assert_eq!(r.l_cpl, 0.0);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let ds = small_dataset();
        let mut config = desk_config(super::super::Preset::Cplae, true);
        config.optimizer.lr = 0.0;
        let mut init_rng = Rng::derive(config.seed, TAG_INIT, 0);
        let reference = Model::new(config.effective_model(), &mut init_rng).unwrap();
        let out = run_training(&ds, &config, None).unwrap();
        for id in reference.store.ids() {
            let name = reference.store.name(id);
            if name.contains("running_") {
                continue; // batchnorm statistics update in train mode regardless
            }
            let a = reference.store.get(id).data();
            let b = out.model.store.get(id).data();
            assert!(
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "parameter {name} changed under lr=0"
            );
        }
    }

    #[test]
    fn same_seed_replays_identical_first_epoch_without_batchnorm() {
        let ds = small_dataset();
        let config = desk_config(super::super::Preset::Cplae, false);
        let a = run_training(&ds, &config, None).unwrap();
        let b = run_training(&ds, &config, None).unwrap();
        assert_eq!(a.log.episodes.len(), b.log.episodes.len());
        for (x, y) in a.log.episodes.iter().zip(&b.log.episodes) {
            assert_eq!(x.l_fsl.to_bits(), y.l_fsl.to_bits());
            assert_eq!(x.l_cpl.to_bits(), y.l_cpl.to_bits());
            assert_eq!(x.l_total.to_bits(), y.l_total.to_bits());
        }
        assert_eq!(
            a.log.to_csv(&config).unwrap(),
            b.log.to_csv(&config).unwrap()
        );
    }

    #[test]
    fn learning_rate_schedule_lands_in_the_log() {
        let ds = small_dataset();
        let mut config = desk_config(super::super::Preset::Protonet, true);
        config.epochs = 3;
        config.episodes_per_epoch = 1;
        config.optimizer.halve_every = 2;
        config.optimizer.lr = 4e-3;
        let out = run_training(&ds, &config, None).unwrap();
        assert_eq!(out.log.epochs[0].lr, 4e-3);
        assert_eq!(out.log.epochs[1].lr, 4e-3);
        assert_eq!(out.log.epochs[2].lr, 2e-3);
    }

    #[test]
    fn best_checkpoint_reproduces_logged_validation_accuracy() {
        let ds = small_dataset();
        let mut config = desk_config(super::super::Preset::Cplae, true);
        config.epochs = 2;
        let dir = std::env::temp_dir().join(format!("cplae_run_{}", std::process::id()));
        let out = run_training(&ds, &config, Some(&dir)).unwrap();
        // The returned model carries the best-epoch weights: re-running the
        // validation episodes must reproduce the logged accuracy exactly.
        let replayed = validation_accuracy(&out.model, &ds, &config).unwrap();
        assert_eq!(replayed.to_bits(), out.log.best_val_accuracy.to_bits());

        // And the best.ckpt artifact restores to the same accuracy.
        let mut init_rng = Rng::derive(config.seed, TAG_INIT, 0);
        let mut fresh = Model::new(config.effective_model(), &mut init_rng).unwrap();
        checkpoint::load(&mut fresh.store, &dir.join("best.ckpt")).unwrap();
        let from_file = validation_accuracy(&fresh, &ds, &config).unwrap();
        assert_eq!(from_file.to_bits(), out.log.best_val_accuracy.to_bits());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_log_has_config_line_header_and_val_on_epoch_close() {
        let ds = small_dataset();
        let mut config = desk_config(super::super::Preset::Cplae, true);
        config.epochs = 2;
        let out = run_training(&ds, &config, None).unwrap();
        let csv = out.log.to_csv(&config).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# config {"));
        assert_eq!(lines[1], "epoch,episode,l_fsl,l_cpl,l_total,val_acc");
        // 2 epochs x 3 episodes = 6 data rows
        assert_eq!(lines.len(), 8);
        let row: Vec<&str> = lines[4].split(',').collect(); // last episode of epoch 0
        assert_eq!(row[0], "0");
        assert_eq!(row[1], "2");
        assert!(!row[5].is_empty(), "val_acc missing on epoch-final row");
        let mid: Vec<&str> = lines[3].split(',').collect();
        assert!(mid[5].is_empty(), "val_acc on a mid-epoch row");
    }

    #[test]
    fn protonet_loss_stream_matches_bare_prototypical_network_oracle() {
        use crate::cplae::fsl_loss;
        // Independent scalar implementation of the prototypical-network
        // loss, computed in f64 straight from embedding values.
        fn bare_protonet(support: &[f64], query: &[f64], n: usize, k: usize, q: usize, d: usize) -> f64 {
            let mut protos = vec![0.0; n * d];
            for c in 0..n {
                for s in 0..k {
                    for j in 0..d {
                        protos[c * d + j] += support[(c * k + s) * d + j] / k as f64;
                    }
                }
            }
            let mut sum = 0.0;
            for c in 0..n {
                for i in 0..q {
                    let row = &query[(c * q + i) * d..(c * q + i + 1) * d];
                    let logits: Vec<f64> = (0..n)
                        .map(|p| {
                            -row.iter()
                                .zip(&protos[p * d..(p + 1) * d])
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                        })
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
                    sum += lse - logits[c];
                }
            }
            sum / (n * q) as f64
        }

        let ds = small_dataset();
        let config = desk_config(super::super::Preset::Protonet, true);
        let mut init_rng = Rng::derive(config.seed, TAG_INIT, 0);
        let model = Model::new(config.effective_model(), &mut init_rng).unwrap();
        let store64 = model.store.cast::<f64>();
        let (n, k, q) = (3usize, 2, 6);
        let d = 8;
        for i in 0..10u64 {
            let mut rng = Rng::derive(5, TAG_EPISODE_TRAIN, i);
            let episode = sample_episode(&ds, Split::Train, &config.episode, &mut rng).unwrap();
            let views = prepare_views(&ds, &episode, &[]).unwrap();
            let mut tape = Tape::<f64>::new();
            let mounted = store64.mount(&mut tape);
            let perm = crate::cplae::fixed_shuffle_permutation(1);
            let embedded =
                crate::cplae::embed_episode(&model, &mut tape, None, &mounted, &views, &perm)
                    .unwrap();
            let protos = crate::cplae::compute_prototypes(&mut tape, embedded.support, n, k).unwrap();
            let labels: Vec<usize> =
                (0..n).flat_map(|c| std::iter::repeat_n(c, q)).collect();
            let (l_fsl, _) = fsl_loss(
                &mut tape,
                embedded.query_ordered,
                protos,
                &labels,
                &model.config.fsl,
            )
            .unwrap();
            let mine = tape.item(l_fsl).unwrap();
            let oracle = bare_protonet(
                tape.value(embedded.support).data(),
                tape.value(embedded.query_ordered).data(),
                n,
                k,
                q,
                d,
            );
            assert!(
                (mine - oracle).abs() < 1e-9,
                "episode {i}: {mine} vs oracle {oracle}"
            );
        }
    }
}
