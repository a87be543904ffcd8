//! Configuration for the contrastive-prototype objective and the few-shot
//! classification loss.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorMode {
    /// Anchors are class prototypes (the published method).
    #[serde(rename = "prototype")]
    Prototype,
    /// Anchors are each class support embedding in turn (ablation variant).
    #[serde(rename = "support_sample")]
    SupportSample,
}

/// Contrastive-loss configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CplConfig {
    /// Softmax temperature T (> 0).
    pub temperature: f64,
    /// Negatives drawn per non-anchor class for each positive (1 ≤ m ≤ q).
    pub negatives_per_class: usize,
    /// Weight λ of the contrastive term in the total loss (≥ 0).
    pub lambda: f64,
    pub anchor_mode: AnchorMode,
    /// Pass query embeddings through the projection head h before cosine.
    pub use_projection: bool,
    /// Use shuffled query embeddings in the contrastive loss.
    pub shuffle_queries: bool,
    /// Also project the anchor. Off by default: the loss compares the raw
    /// anchor against projected queries, so the projection output dimension
    /// must equal the augmented-embedding dimension unless this is set.
    pub project_anchor: bool,
    /// Draw a fresh shuffle permutation (original kept first) per episode
    /// instead of the fixed rotation.
    pub random_shuffle_perm: bool,
}

impl Default for CplConfig {
    fn default() -> Self {
        CplConfig {
            temperature: 1.0,
            negatives_per_class: 6,
            lambda: 0.1,
            anchor_mode: AnchorMode::Prototype,
            use_projection: true,
            shuffle_queries: true,
            project_anchor: false,
            random_shuffle_perm: false,
        }
    }
}

impl CplConfig {
    /// Episode-independent checks.
    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.negatives_per_class < 1 {
            return Err(Error::Config(
                "negatives_per_class must be at least 1".into(),
            ));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Checks that depend on the episode shape.
    pub fn validate_for_queries(&self, q: usize) -> Result<()> {
        self.validate()?;
        if self.negatives_per_class > q {
            return Err(Error::Config(format!(
                "negatives_per_class ({}) exceeds queries per class ({q})",
                self.negatives_per_class
            )));
        }
        Ok(())
    }
}

/// Few-shot classification loss configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct FslConfig {
    /// Divide the summed query losses by q alone (the displayed formula)
    /// instead of the default mean over all n·q queries. The two differ by
    /// the constant factor n.
    pub literal_q_normalization: bool,
    /// Use plain Euclidean distance instead of squared.
    pub plain_distance: bool,
}

