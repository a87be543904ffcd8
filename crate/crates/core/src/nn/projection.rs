//! Projection head for the contrastive loss: affine → relu → affine.

use super::layers::Linear;
use super::params::{Mounted, ParamStore};
use crate::autodiff::{Element, Rng, Tape, Var};
use crate::error::{Error, Result};

pub struct ProjectionHead {
    pub l1: Linear,
    pub l2: Linear,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ProjectionHead {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let l1 = Linear::new(store, rng, &format!("{name}.l1"), in_dim, hidden_dim)?;
        let l2 = Linear::new(store, rng, &format!("{name}.l2"), hidden_dim, out_dim)?;
        Ok(ProjectionHead {
            l1,
            l2,
            in_dim,
            out_dim,
        })
    }

    /// x is (B, in_dim) -> (B, out_dim).
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, m: &Mounted, x: Var) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::Dimension(format!(
                "projection: expected (B, {}), got {s:?}",
                self.in_dim
            )));
        }
        let h = self.l1.forward(tape, m, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, m, h)
    }
}
