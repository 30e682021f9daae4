use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Float, Module};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Adam with bias-corrected moment estimates.
///
/// Moment buffers are matched to parameters by visiting order.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<ArrayD<F>>,
    second: Vec<ArrayD<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<M: Module<F> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (first, second) = (&mut self.first, &mut self.second);
        let mut i = 0;
        model.visit_params("", &mut |_, p| {
            if first.len() == i {
                first.push(ArrayD::zeros(p.value.raw_dim()));
                second.push(ArrayD::zeros(p.value.raw_dim()));
            }
            let (m, v) = (&mut first[i], &mut second[i]);
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    let g = g.as_f64();
                    let mn = beta1 * m.as_f64() + (1.0 - beta1) * g;
                    let vn = beta2 * v.as_f64() + (1.0 - beta2) * g * g;
                    *m = F::cast(mn);
                    *v = F::cast(vn);
                    let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                    *w = F::cast(w.as_f64() - update);
                });
            i += 1;
        });
    }
}
