//! Contrastive prototype learning with augmented embeddings: episode
//! embedding, prototype/contrastive losses, and the end-to-end model.

pub mod config;
pub mod loss;
pub mod model;

pub use config::{AnchorMode, CplConfig, FslConfig};
pub use loss::{
    classify_queries, compute_prototypes, cpl_loss, draw_negatives, fsl_loss, total_loss,
    LossBreakdown, NegativeDraws,
};
pub use model::{
    embed_episode, episode_loss, evaluate_episode, fixed_shuffle_permutation, prepare_views,
    random_shuffle_permutation, EmbeddedEpisode, EpisodeViews, EvalEpisode, Model, ModelConfig,
};
