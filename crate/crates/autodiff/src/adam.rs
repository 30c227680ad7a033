use crate::error::{AutodiffError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer over a fixed subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar = f32> {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    /// Manages `params`; moment buffers are sized from their current values.
    pub fn new(config: AdamConfig, store: &ParamStore<S>, params: Vec<ParamId>) -> Self {
        let m = params
            .iter()
            .map(|&p| vec![S::zero(); store.get(p).numel()])
            .collect();
        let v = params
            .iter()
            .map(|&p| vec![S::zero(); store.get(p).numel()])
            .collect();
        Self {
            config,
            params,
            m,
            v,
            step: 0,
        }
    }

    /// Manages every parameter of the store whose name satisfies `filter`.
    pub fn for_store(
        config: AdamConfig,
        store: &ParamStore<S>,
        filter: impl Fn(&str) -> bool,
    ) -> Self {
        let ids = store
            .iter()
            .filter(|(_, n, _)| filter(n))
            .map(|(id, _, _)| id)
            .collect();
        Self::new(config, store, ids)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected Adam update. Every managed parameter must have a
    /// gradient; `grads` is cleared afterwards.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &mut Gradients<S>) -> Result<()> {
        if let Some(&missing) = self.params.iter().find(|&&p| !grads.contains(p)) {
            return Err(AutodiffError::MissingGradient(
                store.name(missing).to_string(),
            ));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
        let (one_b1, one_b2) = (S::from_f64(1.0 - c.beta1), S::from_f64(1.0 - c.beta2));
        let step_size = S::from_f64(c.lr / bc1);
        let inv_sqrt_bc2 = S::from_f64(1.0 / bc2.sqrt());
        let eps = S::from_f64(c.eps);
        for (slot, &pid) in self.params.iter().enumerate() {
            let g = grads.get(pid).expect("checked above");
            let p = store.get_mut(pid).data_mut();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let denom = v[i].sqrt() * inv_sqrt_bc2 + eps;
                p[i] -= step_size * m[i] / denom;
            }
        }
        grads.clear();
        Ok(())
    }
}
