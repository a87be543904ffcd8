//! Single-head scaled dot-product self-attention over a sample's token group
//! (the original embedding plus its augmented siblings). Learned D×D query /
//! key / value projections, residual connection, no layer normalization, no
//! output projection. One parameter set serves both the ordered and shuffled
//! integration paths.

use super::init::kaiming_uniform;
use super::params::{Mounted, ParamId, ParamStore};
use crate::autodiff::{Element, Rng, Tape, Var};
use crate::error::{Error, Result};

pub struct AttentionIntegrator {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub residual: bool,
    pub tokens: usize,
    pub dim: usize,
}

impl AttentionIntegrator {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        tokens: usize,
        residual: bool,
    ) -> Result<Self> {
        let wq = store.register(
            &format!("{name}.wq"),
            kaiming_uniform(rng, vec![dim, dim], dim),
        )?;
        let wk = store.register(
            &format!("{name}.wk"),
            kaiming_uniform(rng, vec![dim, dim], dim),
        )?;
        let wv = store.register(
            &format!("{name}.wv"),
            kaiming_uniform(rng, vec![dim, dim], dim),
        )?;
        Ok(AttentionIntegrator {
            wq,
            wk,
            wv,
            residual,
            tokens,
            dim,
        })
    }

    /// Batched integration: x is (B, tokens, D) -> (B, tokens, D).
    /// Returns the output and the attention weights (B, tokens, tokens).
    pub fn forward_with_weights<T: Element>(
        &self,
        tape: &mut Tape<T>,
        m: &Mounted,
        x: Var,
    ) -> Result<(Var, Var)> {
        let s = tape.value(x).shape().to_vec();
        if s.len() != 3 || s[1] != self.tokens || s[2] != self.dim {
            return Err(Error::Contract(format!(
                "attention: expected (B, {}, {}) token groups, got {s:?}",
                self.tokens, self.dim
            )));
        }
        let q = tape.matmul(x, m.var(self.wq))?;
        let k = tape.matmul(x, m.var(self.wk))?;
        let v = tape.matmul(x, m.var(self.wv))?;
        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.mul_scalar(scores, T::fromf(1.0 / (self.dim as f64).sqrt()))?;
        let weights = tape.softmax(scaled, 2)?;
        let mixed = tape.matmul(weights, v)?;
        let out = if self.residual {
            tape.add(mixed, x)?
        } else {
            mixed
        };
        Ok((out, weights))
    }

    /// Batched integration, output only.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, m: &Mounted, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, m, x)?.0)
    }

    /// Single token group: (tokens, D) -> (tokens, D).
    pub fn forward_single<T: Element>(
        &self,
        tape: &mut Tape<T>,
        m: &Mounted,
        x: Var,
    ) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Contract(format!(
                "attention: expected (tokens, D), got {s:?}"
            )));
        }
        let batched = tape.reshape(x, vec![1, s[0], s[1]])?;
        let y = self.forward(tape, m, batched)?;
        tape.reshape(y, vec![s[0], s[1]])
    }
}
