use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Result, SlamError};

/// Hyper-parameters of one Adam optimiser.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied every `decay_every` steps.
    pub decay_factor: f64,
    /// 0 disables the step schedule.
    pub decay_every: usize,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 1.0,
            decay_every: 0,
        }
    }

    pub fn with_step_decay(mut self, factor: f64, every: usize) -> Self {
        self.decay_factor = factor;
        self.decay_every = every;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.decay_factor > 0.0
            && self.decay_factor <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(SlamError::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Moments and step counter for a fixed list of parameter arrays.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step_count: usize,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// State for arrays of the given lengths.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        AdamState {
            config,
            step_count: 0,
            first_moment: sizes.iter().map(|n| vec![T::zero(); *n]).collect(),
            second_moment: sizes.iter().map(|n| vec![T::zero(); *n]).collect(),
        }
    }

    pub fn for_store(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).numel()).collect();
        Self::new(config, &sizes)
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Learning rate the next step will use.
    pub fn effective_lr(&self) -> f64 {
        let c = &self.config;
        if c.decay_every == 0 {
            c.lr
        } else {
            c.lr * c.decay_factor.powi((self.step_count / c.decay_every) as i32)
        }
    }

    /// One bias-corrected Adam update of every array.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(SlamError::contract(format!(
                "Adam tracks {} arrays, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first_moment[k].len() || g.len() != p.len() {
                return Err(SlamError::contract(format!(
                    "Adam array {k}: moment length {}, parameter {}, gradient {}",
                    self.first_moment[k].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        let c = self.config;
        let lr = self.effective_lr();
        let t = (self.step_count + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                p[i] = p[i] - step_size * m[i] / denom;
            }
        }
        self.step_count += 1;
        Ok(())
    }

    /// Updates every tensor of `store` from its accumulated gradients.
    pub fn step_store(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let (values, grads) = store.values_and_grads();
        let mut params: Vec<&mut [T]> = values.iter_mut().map(|t| t.data_mut()).collect();
        let grads: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
        self.step(&mut params, &grads)
    }
}
