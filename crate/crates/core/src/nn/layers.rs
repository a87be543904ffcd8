//! Basic layers: convolution, affine, batch normalization.

use super::init::kaiming_uniform;
use super::params::{Mounted, ParamId, ParamStore};
use crate::autodiff::{Element, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// 2-d convolution with square kernel and zero-initialized bias.
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.register(
            &format!("{name}.weight"),
            kaiming_uniform(rng, vec![out_ch, in_ch, kernel, kernel], fan_in),
        )?;
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(vec![out_ch]))?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, m: &Mounted, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, m.var(self.weight), self.stride, self.pad)?;
        let out_ch = tape.value(m.var(self.bias)).numel();
        let b = tape.reshape(m.var(self.bias), vec![1, out_ch, 1, 1])?;
        tape.add(y, b)
    }
}

/// Affine layer: y = x W + b with W stored (in, out).
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.register(
            &format!("{name}.weight"),
            kaiming_uniform(rng, vec![in_dim, out_dim], in_dim),
        )?;
        let bias = store.register(&format!("{name}.bias"), Tensor::zeros(vec![out_dim]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, m: &Mounted, x: Var) -> Result<Var> {
        let y = tape.matmul(x, m.var(self.weight))?;
        tape.add(y, m.var(self.bias))
    }
}

/// Per-channel batch normalization over (N, C, H, W).
///
/// Training normalizes with the batch mean and (biased) batch variance, both
/// inside the graph, then updates the running statistics outside the graph:
/// r ← (1−momentum)·r + momentum·stat, where the variance statistic carries
/// the n/(n−1) correction over n = N·H·W elements (falling back to the biased
/// value when n = 1). Evaluation normalizes with the stored running
/// statistics only, making it a fixed affine map.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        momentum: f64,
        eps: f64,
    ) -> Result<Self> {
        let gamma = store.register(&format!("{name}.gamma"), Tensor::full(vec![channels], T::one()))?;
        let beta = store.register(&format!("{name}.beta"), Tensor::zeros(vec![channels]))?;
        let running_mean =
            store.register_buffer(&format!("{name}.running_mean"), Tensor::zeros(vec![channels]))?;
        let running_var = store.register_buffer(
            &format!("{name}.running_var"),
            Tensor::full(vec![channels], T::one()),
        )?;
        Ok(BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum,
            eps,
            channels,
        })
    }

    fn check_input<T: Element>(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Dimension(format!(
                "batchnorm: expected (N,{},H,W), got {s:?}",
                self.channels
            )));
        }
        Ok(())
    }

    fn affine<T: Element>(
        &self,
        tape: &mut Tape<T>,
        m: &Mounted,
        x: Var,
        mean: Var,
        var: Var,
    ) -> Result<Var> {
        let c = self.channels;
        let centered = tape.sub(x, mean)?;
        let shifted_var = tape.add_scalar(var, T::fromf(self.eps))?;
        let denom = tape.sqrt(shifted_var)?;
        let xhat = tape.div(centered, denom)?;
        let gamma = tape.reshape(m.var(self.gamma), vec![1, c, 1, 1])?;
        let beta = tape.reshape(m.var(self.beta), vec![1, c, 1, 1])?;
        let scaled = tape.mul(xhat, gamma)?;
        tape.add(scaled, beta)
    }

    /// Training-mode forward: batch statistics in the graph, running
    /// statistics updated in the store.
    pub fn forward_train<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        m: &Mounted,
        x: Var,
    ) -> Result<Var> {
        self.check_input(tape, x)?;
        let shape = tape.value(x).shape().to_vec();
        let count = shape[0] * shape[2] * shape[3];
        let mean = tape.mean(x, &[0, 2, 3], true)?;
        let centered = tape.sub(x, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean(sq, &[0, 2, 3], true)?;
        let y = self.affine(tape, m, x, mean, var)?;

        // Running-statistic update happens on plain values, outside the graph.
        let mom = self.momentum;
        let correction = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let batch_mean = tape.value(mean).data().to_vec();
        let batch_var = tape.value(var).data().to_vec();
        {
            let rm = store.get_mut(self.running_mean).data_mut();
            for (r, &b) in rm.iter_mut().zip(&batch_mean) {
                *r = T::fromf((1.0 - mom) * r.tof() + mom * b.tof());
            }
        }
        {
            let rv = store.get_mut(self.running_var).data_mut();
            for (r, &b) in rv.iter_mut().zip(&batch_var) {
                *r = T::fromf((1.0 - mom) * r.tof() + mom * b.tof() * correction);
            }
        }
        Ok(y)
    }

    /// Eval-mode forward: deterministic affine map from running statistics.
    pub fn forward_eval<T: Element>(
        &self,
        tape: &mut Tape<T>,
        m: &Mounted,
        x: Var,
    ) -> Result<Var> {
        self.check_input(tape, x)?;
        let c = self.channels;
        let mean = tape.reshape(m.var(self.running_mean), vec![1, c, 1, 1])?;
        let var = tape.reshape(m.var(self.running_var), vec![1, c, 1, 1])?;
        self.affine(tape, m, x, mean, var)
    }
}
