//! Optimizers. Update rules, stated exactly as implemented:
//!
//! SGD with Nesterov momentum (simplified velocity form):
//!   g_wd = g + wd·θ
//!   v    ← μ·v + g_wd
//!   θ    ← θ − lr·(g_wd + μ·v)
//!
//! Adam (standard bias-corrected moments; weight decay, when nonzero, is
//! classic L2 folded into the gradient):
//!   g_wd = g + wd·θ
//!   m    ← β₁·m + (1−β₁)·g_wd
//!   v    ← β₂·v + (1−β₂)·g_wd²
//!   m̂ = m/(1−β₁ᵗ),  v̂ = v/(1−β₂ᵗ)
//!   θ    ← θ − lr·m̂/(√v̂ + ε)
//!
//! A step covers an explicit list of parameter ids (a parameter group); a
//! listed parameter with no gradient on the tape is a contract error.

use super::params::{Mounted, ParamId, ParamStore};
use crate::autodiff::{Element, Tape, Tensor};
use crate::error::{Error, Result};

pub struct SgdNesterov<T: Element> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Element> SgdNesterov<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdNesterov {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    fn step(
        &mut self,
        store: &mut ParamStore<T>,
        tape: &Tape<T>,
        mounted: &Mounted,
        group: &[ParamId],
    ) -> Result<()> {
        let lr = T::fromf(self.lr);
        let mu = T::fromf(self.momentum);
        let wd = T::fromf(self.weight_decay);
        for &id in group {
            if self.velocity.len() <= id.0 {
                self.velocity.resize(id.0 + 1, None);
            }
            let grad = tape.grad(mounted.var(id)).ok_or_else(|| {
                Error::Contract(format!("missing gradient for parameter {}", store.name(id)))
            })?;
            let g = grad.data().to_vec();
            let v_buf = self.velocity[id.0]
                .get_or_insert_with(|| Tensor::zeros(store.get(id).shape().to_vec()));
            let theta = store.get_mut(id).data_mut();
            let v = v_buf.data_mut();
            for i in 0..theta.len() {
                let g_wd = g[i] + wd * theta[i];
                v[i] = mu * v[i] + g_wd;
                theta[i] = theta[i] - lr * (g_wd + mu * v[i]);
            }
        }
        Ok(())
    }
}

pub struct Adam<T: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn step(
        &mut self,
        store: &mut ParamStore<T>,
        tape: &Tape<T>,
        mounted: &Mounted,
        group: &[ParamId],
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = T::fromf(1.0 - self.beta1.powi(t));
        let bc2 = T::fromf(1.0 - self.beta2.powi(t));
        let (lr, b1, b2) = (
            T::fromf(self.lr),
            T::fromf(self.beta1),
            T::fromf(self.beta2),
        );
        let (eps, wd) = (T::fromf(self.eps), T::fromf(self.weight_decay));
        let one = T::one();
        for &id in group {
            if self.m.len() <= id.0 {
                self.m.resize(id.0 + 1, None);
                self.v.resize(id.0 + 1, None);
            }
            let grad = tape.grad(mounted.var(id)).ok_or_else(|| {
                Error::Contract(format!("missing gradient for parameter {}", store.name(id)))
            })?;
            let g = grad.data().to_vec();
            let shape = store.get(id).shape().to_vec();
            let m_buf = self.m[id.0].get_or_insert_with(|| Tensor::zeros(shape.clone()));
            let m_d = m_buf.data_mut();
            let v_buf = self.v[id.0].get_or_insert_with(|| Tensor::zeros(shape));
            let v_d = v_buf.data_mut();
            let theta = store.get_mut(id).data_mut();
            for i in 0..theta.len() {
                let g_wd = g[i] + wd * theta[i];
                m_d[i] = b1 * m_d[i] + (one - b1) * g_wd;
                v_d[i] = b2 * v_d[i] + (one - b2) * g_wd * g_wd;
                let m_hat = m_d[i] / bc1;
                let v_hat = v_d[i] / bc2;
                theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub enum Optimizer<T: Element> {
    Sgd(SgdNesterov<T>),
    Adam(Adam<T>),
}

impl<T: Element> Optimizer<T> {
    /// Apply one update to every parameter in `group` using gradients from
    /// the (already backward-swept) tape.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        tape: &Tape<T>,
        mounted: &Mounted,
        group: &[ParamId],
    ) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(store, tape, mounted, group),
            Optimizer::Adam(o) => o.step(store, tape, mounted, group),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.lr = lr,
            Optimizer::Adam(o) => o.lr = lr,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd(o) => o.lr,
            Optimizer::Adam(o) => o.lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_setup(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .register("w", Tensor::full(vec![2], value))
            .unwrap();
        (store, id)
    }

    /// Builds loss = sum(w * c) so dL/dw = c exactly.
    fn step_with_grad(
        store: &mut ParamStore<f64>,
        id: ParamId,
        grad_value: f64,
        opt: &mut Optimizer<f64>,
    ) {
        let mut tape = Tape::new();
        let m = store.mount(&mut tape);
        let c = tape.constant(Tensor::full(vec![2], grad_value));
        let prod = tape.mul(m.var(id), c).unwrap();
        let loss = tape.sum(prod, &[], false).unwrap();
        tape.backward(loss).unwrap();
        opt.step(store, &tape, &m, &[id]).unwrap();
    }

    #[test]
    fn sgd_nesterov_first_step_matches_stated_rule() {
        // zero velocity, wd=0: update = -lr*(1+mu)*g
        let (mut store, id) = one_param_setup(1.0);
        let mut opt = Optimizer::Sgd(SgdNesterov::new(0.1, 0.9, 0.0));
        step_with_grad(&mut store, id, 2.0, &mut opt);
        let expect = 1.0 - 0.1 * (1.0 + 0.9) * 2.0;
        for &w in store.get(id).data() {
            assert!((w - expect).abs() < 1e-12, "{w} vs {expect}");
        }
    }

    #[test]
    fn sgd_second_step_uses_velocity() {
        let (mut store, id) = one_param_setup(0.0);
        let (lr, mu, g) = (0.1, 0.9, 1.0);
        let mut opt = Optimizer::Sgd(SgdNesterov::new(lr, mu, 0.0));
        step_with_grad(&mut store, id, g, &mut opt);
        step_with_grad(&mut store, id, g, &mut opt);
        // v1 = g; th1 = -lr(g + mu g) ; v2 = mu g + g; th2 = th1 - lr(g + mu v2)
        let v1 = g;
        let th1 = 0.0 - lr * (g + mu * v1);
        let v2 = mu * v1 + g;
        let th2 = th1 - lr * (g + mu * v2);
        assert!((store.get(id).data()[0] - th2).abs() < 1e-12);
    }

    #[test]
    fn sgd_weight_decay_enters_gradient() {
        let (mut store, id) = one_param_setup(2.0);
        let mut opt = Optimizer::Sgd(SgdNesterov::new(0.1, 0.0, 0.5));
        step_with_grad(&mut store, id, 0.0, &mut opt);
        // g_wd = 0 + 0.5*2 = 1; mu=0 so update = -lr*g_wd
        assert!((store.get(id).data()[0] - (2.0 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let (mut store, id) = one_param_setup(1.0);
        let mut opt = Optimizer::Adam(Adam::new(0.01, 0.9, 0.999, 0.0, 0.0));
        step_with_grad(&mut store, id, 3.0, &mut opt);
        // with eps=0, first step = -lr * sign(g)
        assert!((store.get(id).data()[0] - 0.99).abs() < 1e-12);
        let (mut store2, id2) = one_param_setup(1.0);
        let mut opt2 = Optimizer::Adam(Adam::new(0.01, 0.9, 0.999, 0.0, 0.0));
        step_with_grad(&mut store2, id2, -0.5, &mut opt2);
        assert!((store2.get(id2).data()[0] - 1.01).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_zero_wd_leaves_parameters_unchanged() {
        let (mut store, id) = one_param_setup(1.25);
        let mut opt = Optimizer::Sgd(SgdNesterov::new(0.1, 0.9, 0.0));
        step_with_grad(&mut store, id, 0.0, &mut opt);
        assert_eq!(store.get(id).data(), &[1.25, 1.25]);
    }

    #[test]
    fn lr_zero_step_is_bitwise_identity() {
        let (mut store, id) = one_param_setup(0.731);
        let before = store.get(id).data().to_vec();
        let mut opt = Optimizer::Adam(Adam::new(0.0, 0.9, 0.999, 1e-8, 0.0));
        step_with_grad(&mut store, id, 1.7, &mut opt);
        assert_eq!(store.get(id).data(), before.as_slice());
        let mut opt2 = Optimizer::Sgd(SgdNesterov::new(0.0, 0.9, 0.0));
        step_with_grad(&mut store, id, 1.7, &mut opt2);
        assert_eq!(store.get(id).data(), before.as_slice());
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut store = ParamStore::<f64>::new();
        let used = store.register("used", Tensor::full(vec![1], 1.0)).unwrap();
        let unused = store.register("unused", Tensor::full(vec![1], 1.0)).unwrap();
        let mut tape = Tape::new();
        let m = store.mount(&mut tape);
        let loss = tape.sum(m.var(used), &[], false).unwrap();
        tape.backward(loss).unwrap();
        let mut opt = Optimizer::Sgd(SgdNesterov::new(0.1, 0.9, 0.0));
        let err = opt.step(&mut store, &tape, &m, &[used, unused]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
