use super::array::{Array, Grads, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Bias-corrected Adam with global-norm clipping applied before the moment
/// updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Array> = params.iter().map(|(_, _, a)| Array::zeros(a.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. A non-finite gradient aborts the step and leaves
    /// both parameters and optimizer state untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<StepReport> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let grad_norm = grads.global_norm();
        let scale = match self.config.clip_norm {
            Some(max) if grad_norm > max => max / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else {
                // zero gradient: moments decay, parameter moves by the
                // remaining momentum only
                let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
                if m.data().iter().all(|x| *x == 0.0) {
                    continue;
                }
                let p = params.get_mut(id);
                for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()) {
                    *mv *= beta1;
                    *vv *= beta2;
                    *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                }
                continue;
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id);
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gv = gv * scale;
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            }
        }
        Ok(StepReport {
            grad_norm,
            clipped: scale < 1.0,
        })
    }
}
