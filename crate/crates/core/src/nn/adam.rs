use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let one = T::one();
        let c1 = T::lit(1.0 - self.config.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.config.beta2.powi(self.step as i32));
        let eps = T::lit(self.config.eps);
        let lr = T::lit(lr);
        let groups = params
            .params_mut()
            .iter_mut()
            .zip(grads.params())
            .zip(self.m.params_mut().iter_mut().zip(self.v.params_mut().iter_mut()));
        for ((p, g), (m, v)) in groups {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] = p.data[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
