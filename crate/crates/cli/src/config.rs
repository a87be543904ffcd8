//! Run-configuration files: a flat two-level JSON document with sections
//! `data`, `backbone`, `cplae`, `optimizer`, `train`, and `eval`. Every
//! field is optional; unknown keys anywhere are rejected. Resolution fills
//! in defaults (backbone input dimensions come from the dataset) and yields
//! both the core configs and a fully-populated echo of the file — feeding
//! the echo back reproduces the run exactly.

use cplae_core::cplae::{AnchorMode, CplConfig, FslConfig, ModelConfig};
use cplae_core::data::{
    load_dataset, synth_generate, AugmentationKind, EpisodeConfig, LabeledDataset,
};
use cplae_core::nn::BackboneConfig;
use cplae_core::train::{OptimizerConfig, Preset, PretrainConfig, TrainConfig};
use cplae_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub data: DataSection,
    pub backbone: BackboneSection,
    pub cplae: CplaeSection,
    pub optimizer: OptimizerConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// Dataset source. When `manifest` is set it wins; otherwise a synthetic
/// dataset is generated from the remaining fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<String>,
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            classes: 20,
            per_class: 40,
            size: 32,
            seed: 0,
        }
    }
}

/// Backbone overrides. Input dimensions default to the dataset's image
/// shape; everything else defaults to the Conv4-64 recipe.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub channels: Option<Vec<usize>>,
    pub use_batchnorm: Option<bool>,
    pub bn_momentum: Option<f64>,
    pub bn_eps: Option<f64>,
    pub in_channels: Option<usize>,
    pub in_h: Option<usize>,
    pub in_w: Option<usize>,
}

/// Model and objective flags (the preset in the train section is applied on
/// top of these and wins where they overlap).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CplaeSection {
    pub views: Option<usize>,
    pub attention_residual: Option<bool>,
    pub projection_hidden: Option<usize>,
    pub projection_out: Option<usize>,
    pub lambda: Option<f64>,
    pub temperature: Option<f64>,
    pub negatives_per_class: Option<usize>,
    pub anchor_mode: Option<AnchorMode>,
    pub use_projection: Option<bool>,
    pub shuffle_queries: Option<bool>,
    pub project_anchor: Option<bool>,
    pub random_shuffle_perm: Option<bool>,
    pub literal_q_normalization: Option<bool>,
    pub plain_distance: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub preset: Option<Preset>,
    pub epochs: Option<usize>,
    pub episodes_per_epoch: Option<usize>,
    pub val_episodes: Option<usize>,
    pub n_way: Option<usize>,
    pub k_shot: Option<usize>,
    pub q_queries: Option<usize>,
    pub augmentations: Option<Vec<AugmentationKind>>,
    pub pretrain: Option<bool>,
    pub pretrain_epochs: Option<usize>,
    pub pretrain_batch_size: Option<usize>,
    pub pretrain_lr: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Meta-test episodes (default 500).
    pub episodes: Option<usize>,
    /// Also write `embeddings.csv` (augmented embeddings of a few episodes).
    pub export_embeddings: Option<bool>,
    /// Episodes included in the embedding export (default 5).
    pub export_episodes: Option<usize>,
}

/// A resolved run: core configs plus the fully-populated file echo.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    /// Every optional filled in — serialized into output artifacts, and a
    /// valid config file that reproduces this run.
    pub echo: RunConfigFile,
    pub train: TrainConfig,
    pub eval_episodes: usize,
    pub export_embeddings: bool,
    pub export_episodes: usize,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<RunConfigFile> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfigFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        RunConfigFile::parse(&text)
    }

    /// Load or generate the dataset this config points at.
    pub fn load_data(&self) -> Result<LabeledDataset> {
        match &self.data.manifest {
            Some(p) => load_dataset(Path::new(p)),
            None => synth_generate(
                self.data.classes,
                self.data.per_class,
                self.data.size,
                self.data.seed,
            ),
        }
    }

    /// Apply defaults against the dataset's image shape and assemble the
    /// core configs. `seed_override` (the `--seed` flag) wins over the
    /// file's `train.seed`.
    pub fn resolve(
        &self,
        dataset: &LabeledDataset,
        seed_override: Option<u64>,
    ) -> Result<ResolvedRun> {
        let shape = dataset.image_shape();
        let bdef = BackboneConfig::default();
        let backbone = BackboneConfig {
            channels: self.backbone.channels.clone().unwrap_or(bdef.channels),
            use_batchnorm: self.backbone.use_batchnorm.unwrap_or(bdef.use_batchnorm),
            bn_momentum: self.backbone.bn_momentum.unwrap_or(bdef.bn_momentum),
            bn_eps: self.backbone.bn_eps.unwrap_or(bdef.bn_eps),
            in_channels: self.backbone.in_channels.unwrap_or(shape[0]),
            in_h: self.backbone.in_h.unwrap_or(shape[1]),
            in_w: self.backbone.in_w.unwrap_or(shape[2]),
        };

        let mdef = ModelConfig::default();
        let cdef = CplConfig::default();
        let fdef = FslConfig::default();
        let mut model = ModelConfig {
            backbone,
            views: self.cplae.views.unwrap_or(mdef.views),
            attention_residual: self
                .cplae
                .attention_residual
                .unwrap_or(mdef.attention_residual),
            projection_hidden: self.cplae.projection_hidden.or(mdef.projection_hidden),
            projection_out: self.cplae.projection_out.or(mdef.projection_out),
            cpl: CplConfig {
                temperature: self.cplae.temperature.unwrap_or(cdef.temperature),
                negatives_per_class: self
                    .cplae
                    .negatives_per_class
                    .unwrap_or(cdef.negatives_per_class),
                lambda: self.cplae.lambda.unwrap_or(cdef.lambda),
                anchor_mode: self.cplae.anchor_mode.unwrap_or(cdef.anchor_mode),
                use_projection: self.cplae.use_projection.unwrap_or(cdef.use_projection),
                shuffle_queries: self.cplae.shuffle_queries.unwrap_or(cdef.shuffle_queries),
                project_anchor: self.cplae.project_anchor.unwrap_or(cdef.project_anchor),
                random_shuffle_perm: self
                    .cplae
                    .random_shuffle_perm
                    .unwrap_or(cdef.random_shuffle_perm),
            },
            fsl: FslConfig {
                literal_q_normalization: self
                    .cplae
                    .literal_q_normalization
                    .unwrap_or(fdef.literal_q_normalization),
                plain_distance: self.cplae.plain_distance.unwrap_or(fdef.plain_distance),
            },
        };
        // Materialize the projection dimensions so the echo is literal.
        model.projection_hidden = Some(model.resolved_projection_hidden());
        model.projection_out = Some(model.resolved_projection_out());

        let edef = EpisodeConfig::default();
        let episode = EpisodeConfig {
            n_way: self.train.n_way.unwrap_or(edef.n_way),
            k_shot: self.train.k_shot.unwrap_or(edef.k_shot),
            q_queries: self.train.q_queries.unwrap_or(edef.q_queries),
            augmentations: self
                .train
                .augmentations
                .clone()
                .unwrap_or(edef.augmentations),
        };

        let pdef = PretrainConfig::default();
        let pretrain = if self.train.pretrain.unwrap_or(true) {
            Some(PretrainConfig {
                epochs: self.train.pretrain_epochs.unwrap_or(pdef.epochs),
                batch_size: self.train.pretrain_batch_size.unwrap_or(pdef.batch_size),
                lr: self.train.pretrain_lr.unwrap_or(pdef.lr),
            })
        } else {
            None
        };

        let tdef = TrainConfig::default();
        let seed = seed_override.or(self.train.seed).unwrap_or(tdef.seed);
        let train = TrainConfig {
            preset: self.train.preset.unwrap_or(tdef.preset),
            epochs: self.train.epochs.unwrap_or(tdef.epochs),
            episodes_per_epoch: self
                .train
                .episodes_per_epoch
                .unwrap_or(tdef.episodes_per_epoch),
            val_episodes: self.train.val_episodes.unwrap_or(tdef.val_episodes),
            episode,
            model,
            optimizer: self.optimizer.clone(),
            pretrain,
            seed,
        };
        train.validate()?;

        let eval_episodes = self.eval.episodes.unwrap_or(500);
        if eval_episodes == 0 {
            return Err(Error::Config("eval.episodes must be positive".into()));
        }
        let export_embeddings = self.eval.export_embeddings.unwrap_or(false);
        let export_episodes = self.eval.export_episodes.unwrap_or(5);

        let echo = RunConfigFile {
            data: self.data.clone(),
            backbone: BackboneSection {
                channels: Some(train.model.backbone.channels.clone()),
                use_batchnorm: Some(train.model.backbone.use_batchnorm),
                bn_momentum: Some(train.model.backbone.bn_momentum),
                bn_eps: Some(train.model.backbone.bn_eps),
                in_channels: Some(train.model.backbone.in_channels),
                in_h: Some(train.model.backbone.in_h),
                in_w: Some(train.model.backbone.in_w),
            },
            cplae: CplaeSection {
                views: Some(train.model.views),
                attention_residual: Some(train.model.attention_residual),
                projection_hidden: Some(train.model.resolved_projection_hidden()),
                projection_out: Some(train.model.resolved_projection_out()),
                lambda: Some(train.model.cpl.lambda),
                temperature: Some(train.model.cpl.temperature),
                negatives_per_class: Some(train.model.cpl.negatives_per_class),
                anchor_mode: Some(train.model.cpl.anchor_mode),
                use_projection: Some(train.model.cpl.use_projection),
                shuffle_queries: Some(train.model.cpl.shuffle_queries),
                project_anchor: Some(train.model.cpl.project_anchor),
                random_shuffle_perm: Some(train.model.cpl.random_shuffle_perm),
                literal_q_normalization: Some(train.model.fsl.literal_q_normalization),
                plain_distance: Some(train.model.fsl.plain_distance),
            },
            optimizer: train.optimizer.clone(),
            train: TrainSection {
                preset: Some(train.preset),
                epochs: Some(train.epochs),
                episodes_per_epoch: Some(train.episodes_per_epoch),
                val_episodes: Some(train.val_episodes),
                n_way: Some(train.episode.n_way),
                k_shot: Some(train.episode.k_shot),
                q_queries: Some(train.episode.q_queries),
                augmentations: Some(train.episode.augmentations.clone()),
                pretrain: Some(train.pretrain.is_some()),
                pretrain_epochs: Some(train.pretrain.as_ref().map_or(pdef.epochs, |p| p.epochs)),
                pretrain_batch_size: Some(
                    train.pretrain.as_ref().map_or(pdef.batch_size, |p| p.batch_size),
                ),
                pretrain_lr: Some(train.pretrain.as_ref().map_or(pdef.lr, |p| p.lr)),
                seed: Some(seed),
            },
            eval: EvalSection {
                episodes: Some(eval_episodes),
                export_embeddings: Some(export_embeddings),
                export_episodes: Some(export_episodes),
            },
        };
        Ok(ResolvedRun {
            echo,
            train,
            eval_episodes,
            export_embeddings,
            export_episodes,
        })
    }
}
