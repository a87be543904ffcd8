//! The end-to-end model: backbone → (per-view embeddings) → attention
//! integration → augmented embeddings → losses, plus the eval-mode paths.

use super::config::{AnchorMode, CplConfig, FslConfig};
use super::loss::{
    classify_queries, compute_prototypes, cpl_loss, draw_negatives, fsl_loss, total_loss,
    LossBreakdown,
};
use crate::autodiff::{Element, Rng, Tape, Tensor, Var};
use crate::data::{augment, AugmentationKind, Episode, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{
    AttentionIntegrator, Backbone, BackboneConfig, Mounted, ParamId, ParamStore, ProjectionHead,
};

/// Everything needed to build the network. `views` is the token count t
/// (original + augmentations): t = 1 builds the plain-prototype baseline
/// with no integrator; t > 1 builds the augmented-embedding pipeline.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub views: usize,
    pub attention_residual: bool,
    pub projection_hidden: Option<usize>,
    pub projection_out: Option<usize>,
    pub cpl: CplConfig,
    pub fsl: FslConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            views: 4,
            attention_residual: true,
            projection_hidden: None,
            projection_out: None,
            cpl: CplConfig::default(),
            fsl: FslConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Augmented-embedding dimension t·D.
    pub fn ae_dim(&self) -> usize {
        self.views * self.backbone.embedding_dim()
    }

    pub fn resolved_projection_hidden(&self) -> usize {
        self.projection_hidden.unwrap_or_else(|| self.ae_dim())
    }

    pub fn resolved_projection_out(&self) -> usize {
        self.projection_out.unwrap_or_else(|| self.ae_dim())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.cpl.validate()?;
        if self.views == 0 {
            return Err(Error::Config("views must be at least 1".into()));
        }
        if self.views > 8 {
            return Err(Error::Config(format!(
                "views must be at most 8 (1 original + up to 7 augmentations), got {}",
                self.views
            )));
        }
        if self.cpl.lambda > 0.0
            && self.cpl.use_projection
            && !self.cpl.project_anchor
            && self.resolved_projection_out() != self.ae_dim()
        {
            return Err(Error::Config(format!(
                "projection output dim {} must equal the augmented-embedding dim {} when the \
                 anchor is not projected (set project_anchor or adjust the dim)",
                self.resolved_projection_out(),
                self.ae_dim()
            )));
        }
        Ok(())
    }

    /// Whether the contrastive path (and its projection head) exists.
    pub fn has_projection(&self) -> bool {
        self.cpl.lambda > 0.0 && self.cpl.use_projection
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    pub backbone: Backbone,
    pub attention: Option<AttentionIntegrator>,
    pub projection: Option<ProjectionHead>,
}

impl Model {
    /// Build and initialize a model. Registration (and therefore
    /// initialization-draw and checkpoint) order is fixed: backbone blocks,
    /// then attention, then projection.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, rng, "backbone", config.backbone.clone())?;
        let dim = config.backbone.embedding_dim();
        let attention = if config.views > 1 {
            Some(AttentionIntegrator::new(
                &mut store,
                rng,
                "attention",
                dim,
                config.views,
                config.attention_residual,
            )?)
        } else {
            None
        };
        let projection = if config.has_projection() {
            Some(ProjectionHead::new(
                &mut store,
                rng,
                "projection",
                config.ae_dim(),
                config.resolved_projection_hidden(),
                config.resolved_projection_out(),
            )?)
        } else {
            None
        };
        Ok(Model {
            config,
            store,
            backbone,
            attention,
            projection,
        })
    }

    /// Trainable parameter ids of the meta-learned model (everything except
    /// auxiliary heads registered later, e.g. the pretraining classifier).
    pub fn meta_param_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| {
                self.store.is_trainable(id) && !self.store.name(id).starts_with("pretrain_head.")
            })
            .collect()
    }

    pub fn ae_dim(&self) -> usize {
        self.config.ae_dim()
    }
}

/// The image batches for one episode: one (B, C, H, W) tensor per view,
/// support rows first (class-major), then query rows (class-major).
/// View 0 is the original image; view j is augmentation j−1.
pub struct EpisodeViews {
    pub views: Vec<Tensor<f32>>,
    pub n: usize,
    pub k: usize,
    pub q: usize,
}

/// Render an episode into stacked per-view batches: the original images,
/// then one view per listed augmentation. Callers pass the slice matching
/// the model's view count (empty for a single-view model).
pub fn prepare_views(
    dataset: &LabeledDataset,
    episode: &Episode,
    augmentations: &[AugmentationKind],
) -> Result<EpisodeViews> {
    let ids: Vec<usize> = episode
        .support_ids
        .iter()
        .chain(&episode.query_ids)
        .cloned()
        .collect();
    let mut views = vec![dataset.stack(&ids)];
    for &kind in augmentations {
        let mut data = Vec::new();
        let mut shape = None;
        for &id in &ids {
            let img = augment(kind, dataset.image(id))?;
            shape.get_or_insert_with(|| img.shape().to_vec());
            data.extend_from_slice(img.data());
        }
        let per = shape.expect("episode is non-empty");
        let mut full = vec![ids.len()];
        full.extend_from_slice(&per);
        views.push(Tensor::new(full, data)?);
    }
    Ok(EpisodeViews {
        views,
        n: episode.classes.len(),
        k: episode.k_shot,
        q: episode.q_queries,
    })
}

/// The shuffle order for t post-attention tokens: original first, then the
/// augmentation tokens rotated by one — (0, 2, 3, 1) at t = 4.
pub fn fixed_shuffle_permutation(views: usize) -> Vec<usize> {
    let mut perm = vec![0];
    for j in 2..views {
        perm.push(j);
    }
    if views > 1 {
        perm.push(1);
    }
    perm
}

/// A random shuffle order keeping the original token first.
pub fn random_shuffle_permutation(views: usize, rng: &mut Rng) -> Vec<usize> {
    let mut rest: Vec<usize> = (1..views).collect();
    rng.shuffle(&mut rest);
    let mut perm = vec![0];
    perm.extend(rest);
    perm
}

/// Episode embeddings on the tape. With t = 1 the "augmented" embeddings
/// are the raw backbone embeddings and `query_shuffled == query_ordered`.
pub struct EmbeddedEpisode {
    /// (n·k, t·D), class-major, ordered concatenation.
    pub support: Var,
    /// (n·q, t·D), class-major, ordered concatenation.
    pub query_ordered: Var,
    /// (n·q, t·D), same post-attention tokens, shuffled concatenation.
    pub query_shuffled: Var,
}

/// Run the backbone (+ integrator) over all views of all episode images in
/// one batch. `bn_store` selects train mode (batch statistics + running
/// updates) when `Some`, eval mode when `None`. The sample axis is ordered
/// view-major — all view-0 rows, then view-1 — so batchnorm statistics mix
/// every view of the whole episode, matching one joint forward pass.
pub fn embed_episode<T: Element>(
    model: &Model,
    tape: &mut Tape<T>,
    bn_store: Option<&mut ParamStore<T>>,
    mounted: &Mounted,
    views: &EpisodeViews,
    shuffle_perm: &[usize],
) -> Result<EmbeddedEpisode> {
    let t = views.views.len();
    if t != model.config.views {
        return Err(Error::Contract(format!(
            "episode prepared with {t} views but the model integrates {}",
            model.config.views
        )));
    }
    if shuffle_perm.len() != t
        || shuffle_perm.first() != Some(&0)
        || {
            let mut sorted = shuffle_perm.to_vec();
            sorted.sort_unstable();
            sorted != (0..t).collect::<Vec<_>>()
        }
    {
        return Err(Error::Contract(format!(
            "shuffle permutation {shuffle_perm:?} must permute 0..{t} keeping 0 first"
        )));
    }
    let batch = views.views[0].shape()[0];
    let expected = views.n * (views.k + views.q);
    if batch != expected {
        return Err(Error::Contract(format!(
            "episode batch is {batch} rows, expected n(k+q) = {expected}"
        )));
    }

    // View-major stacked batch: (t·B, C, H, W).
    let mut data = Vec::new();
    for view in &views.views {
        for &v in view.data() {
            data.push(T::fromf(v as f64));
        }
    }
    let mut shape = views.views[0].shape().to_vec();
    shape[0] = t * batch;
    let images = tape.constant(Tensor::new(shape, data)?);

    let embedded = match bn_store {
        Some(store) => model.backbone.forward_train(tape, store, mounted, images)?,
        None => model.backbone.forward_eval(tape, mounted, images)?,
    };
    let dim = model.config.backbone.embedding_dim();
    let n_support = views.n * views.k;

    if t == 1 {
        let support = tape.slice(embedded, 0, 0, n_support)?;
        let queries = tape.slice(embedded, 0, n_support, batch - n_support)?;
        return Ok(EmbeddedEpisode {
            support,
            query_ordered: queries,
            query_shuffled: queries,
        });
    }

    let attention = model
        .attention
        .as_ref()
        .expect("views > 1 implies an integrator");
    let by_view = tape.reshape(embedded, vec![t, batch, dim])?;
    let tokens = tape.permute(by_view, &[1, 0, 2])?; // (B, t, D)
    let integrated = attention.forward(tape, mounted, tokens)?; // (B, t, D)

    let ordered = tape.reshape(integrated, vec![batch, t * dim])?;
    let support = tape.slice(ordered, 0, 0, n_support)?;
    let query_ordered = tape.slice(ordered, 0, n_support, batch - n_support)?;

    let shuffled_tokens = tape.index_select(integrated, 1, shuffle_perm)?;
    let shuffled = tape.reshape(shuffled_tokens, vec![batch, t * dim])?;
    let query_shuffled = tape.slice(shuffled, 0, n_support, batch - n_support)?;

    Ok(EmbeddedEpisode {
        support,
        query_ordered,
        query_shuffled,
    })
}

/// Full training-mode episode pass: embeddings → prototypes → losses.
/// `episode_rng` drives the stochastic pieces in a fixed draw order (shuffle
/// permutation first if randomized, then negative draws), so the loss is
/// replayable from the episode seed. Returns the loss node (for backward)
/// and the 64-bit breakdown.
pub fn episode_loss<T: Element>(
    model: &Model,
    tape: &mut Tape<T>,
    bn_store: Option<&mut ParamStore<T>>,
    mounted: &Mounted,
    views: &EpisodeViews,
    episode_rng: &mut Rng,
) -> Result<(Var, LossBreakdown)> {
    let (n, k, q) = (views.n, views.k, views.q);
    let cpl_cfg = &model.config.cpl;
    let shuffle_perm = if cpl_cfg.random_shuffle_perm {
        random_shuffle_permutation(model.config.views, episode_rng)
    } else {
        fixed_shuffle_permutation(model.config.views)
    };
    let embedded = embed_episode(model, tape, bn_store, mounted, views, &shuffle_perm)?;
    let prototypes = compute_prototypes(tape, embedded.support, n, k)?;

    let labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, q)).collect();
    let (l_fsl, posteriors) = fsl_loss(
        tape,
        embedded.query_ordered,
        prototypes,
        &labels,
        &model.config.fsl,
    )?;

    let l_cpl = if cpl_cfg.lambda > 0.0 {
        let draws = draw_negatives(n, q, cpl_cfg.negatives_per_class, episode_rng);
        let anchors = match cpl_cfg.anchor_mode {
            AnchorMode::Prototype => prototypes,
            AnchorMode::SupportSample => embedded.support,
        };
        let queries = if cpl_cfg.shuffle_queries {
            embedded.query_shuffled
        } else {
            embedded.query_ordered
        };
        Some(cpl_loss(
            tape,
            mounted,
            anchors,
            queries,
            n,
            q,
            model.projection.as_ref(),
            cpl_cfg,
            &draws,
        )?)
    } else {
        None
    };

    let loss = total_loss(tape, l_fsl, l_cpl, cpl_cfg.lambda)?;
    let fsl_value = tape.item(l_fsl)?.tof();
    let cpl_value = l_cpl.map(|v| tape.item(v)).transpose()?.map(|v| v.tof());
    let l_cpl_f = cpl_value.unwrap_or(0.0);
    let breakdown = LossBreakdown {
        l_fsl: fsl_value,
        l_cpl: l_cpl_f,
        l_total: fsl_value + cpl_cfg.lambda * l_cpl_f,
        posteriors,
    };
    Ok((loss, breakdown))
}

/// Eval-mode episode pass: deterministic embeddings (running batchnorm
/// statistics, ordered concatenation only), nearest-prototype predictions,
/// and the raw embedding values for diagnostics.
pub struct EvalEpisode {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub accuracy: f64,
    /// (n·k, t·D) support and (n·q, t·D) query embedding values.
    pub support: Tensor<f32>,
    pub queries: Tensor<f32>,
    pub prototypes: Tensor<f32>,
}

pub fn evaluate_episode(model: &Model, views: &EpisodeViews) -> Result<EvalEpisode> {
    let mut tape = Tape::<f32>::new();
    let mounted = model.store.mount(&mut tape);
    let perm = fixed_shuffle_permutation(model.config.views);
    let embedded = embed_episode(model, &mut tape, None, &mounted, views, &perm)?;
    let (n, k, q) = (views.n, views.k, views.q);
    let prototypes = compute_prototypes(&mut tape, embedded.support, n, k)?;
    let support = tape.value(embedded.support).clone();
    let queries = tape.value(embedded.query_ordered).clone();
    let protos = tape.value(prototypes).clone();
    let predictions = classify_queries(&queries, &protos)?;
    let labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, q)).collect();
    let correct = predictions
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    let accuracy = correct as f64 / labels.len() as f64;
    Ok(EvalEpisode {
        predictions,
        labels,
        accuracy,
        support,
        queries,
        prototypes: protos,
    })
}
