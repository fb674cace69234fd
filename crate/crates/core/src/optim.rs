//! Adam with separate learning rates for the depth and pose parameter groups.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamGrads, ParamGroup, ParamStore};
use crate::{math, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr_depth: f64,
    pub lr_pose: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_depth: 2e-5,
            lr_pose: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_depth > 0.0
            && self.lr_pose > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(alloc::format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Depth => self.lr_depth,
            ParamGroup::Pose => self.lr_pose,
        }
    }
}

/// Bias-corrected Adam. Moment buffers are created lazily per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: vec![Vec::new(); params.len()],
            v: vec![Vec::new(); params.len()],
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Learning rate of every group present in `params`.
    pub fn group_lrs(&self, params: &ParamStore) -> Vec<(ParamGroup, f64)> {
        let mut out: Vec<(ParamGroup, f64)> = Vec::new();
        for (_, e) in params.iter() {
            if !out.iter().any(|(g, _)| *g == e.group) {
                out.push((e.group, self.config.lr(e.group)));
            }
        }
        out
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - math::powf(c.beta1, t);
        let bc2 = 1.0 - math::powf(c.beta2, t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let lr = c.lr(params.entry(id).group);
            let i = id.index();
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; g.len()];
                self.v[i] = vec![0.0; g.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in params.get_mut(id).data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (math::sqrt(v_hat) + c.eps);
            }
        }
    }
}
