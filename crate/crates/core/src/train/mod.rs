//! Episodic meta-training: the training loop with the combined objective,
//! optional backbone pre-training, and best-by-validation checkpointing.

pub mod pretrain;
pub mod run;

pub use pretrain::{pretrain_backbone, PretrainConfig};
pub use run::{
    copy_backbone, run_training, run_training_observed, run_training_warm, train_step,
    validation_accuracy, view_augmentations, EpisodeRecord, EpochRecord, RunLog, TrainOutput,
};

use crate::cplae::ModelConfig;
use crate::data::EpisodeConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, LrSchedule, Optimizer, SgdNesterov};
use serde::{Deserialize, Serialize};

/// Ablation presets: each maps to one row of the component-ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Plain prototypical network: single view, no contrastive term.
    Protonet,
    /// Augmented embeddings for prototypes, still no contrastive term.
    ProtonetAe,
    /// Full objective but ordered (unshuffled) queries in the contrastive term.
    CplaeNoshuffle,
    /// The complete method.
    Cplae,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Protonet,
        Preset::ProtonetAe,
        Preset::CplaeNoshuffle,
        Preset::Cplae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Protonet => "protonet",
            Preset::ProtonetAe => "protonet_ae",
            Preset::CplaeNoshuffle => "cplae_noshuffle",
            Preset::Cplae => "cplae",
        }
    }

    pub fn parse(s: &str) -> Result<Preset> {
        match s {
            "protonet" => Ok(Preset::Protonet),
            "protonet_ae" => Ok(Preset::ProtonetAe),
            "cplae_noshuffle" => Ok(Preset::CplaeNoshuffle),
            "cplae" => Ok(Preset::Cplae),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected protonet, protonet_ae, \
                 cplae_noshuffle, or cplae)"
            ))),
        }
    }

    /// Rewrite a model configuration to this preset's row. Each preset
    /// changes exactly the documented flags and nothing else.
    pub fn apply(self, model: &mut ModelConfig) {
        match self {
            Preset::Protonet => {
                model.views = 1;
                model.cpl.lambda = 0.0;
                model.cpl.use_projection = false;
            }
            Preset::ProtonetAe => {
                model.cpl.lambda = 0.0;
                model.cpl.use_projection = false;
            }
            Preset::CplaeNoshuffle => {
                model.cpl.shuffle_queries = false;
            }
            Preset::Cplae => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer and learning-rate-schedule settings. The defaults follow the
/// Conv4 recipe: Adam at 1e-4, halved every 20 epochs; the SGD fields
/// (Nesterov momentum, weight decay) take effect when `kind` is `sgd`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub halve_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 0.0,
            halve_every: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.halve_every == 0 {
            return Err(Error::Config("halve_every must be positive".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Optimizer<f32> {
        match self.kind {
            OptimizerKind::Sgd => Optimizer::Sgd(SgdNesterov::new(
                self.lr,
                self.momentum,
                self.weight_decay,
            )),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                self.weight_decay,
            )),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr, self.halve_every)
    }
}

/// Everything a training run needs besides the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub preset: Preset,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Seeded validation episodes evaluated after every epoch; the same
    /// episodes recur so per-epoch scores are comparable.
    pub val_episodes: usize,
    pub episode: EpisodeConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// `None` disables pre-training; meta-training then starts from the
    /// seeded initialization.
    pub pretrain: Option<PretrainConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: Preset::Cplae,
            epochs: 100,
            episodes_per_epoch: 100,
            val_episodes: 200,
            episode: EpisodeConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            pretrain: Some(PretrainConfig::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The model configuration with the preset row applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut model = self.model.clone();
        self.preset.apply(&mut model);
        model
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return Err(Error::Config(
                "epochs and episodes_per_epoch must be positive".into(),
            ));
        }
        self.episode.validate()?;
        self.effective_model().validate()?;
        self.optimizer.validate()?;
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        let eff = self.effective_model();
        if eff.cpl.lambda > 0.0 {
            eff.cpl.validate_for_queries(self.episode.q_queries)?;
        }
        if eff.views > 1 && eff.views != self.episode.view_count() {
            return Err(Error::Config(format!(
                "model integrates {} views but the episode config provides {} \
                 (1 original + {} augmentations)",
                eff.views,
                self.episode.view_count(),
                self.episode.augmentations.len()
            )));
        }
        Ok(())
    }
}
