//! Adam with bias-corrected moment estimates.

use super::network::Layer;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    params: AdamParams,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: AdamParams, layers: &[Layer]) -> Self {
        let zeros: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.weights.len()]).collect();
        Self {
            lr,
            params,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, layers: &mut [Layer], grads: &[Vec<f64>]) {
        self.t = self.t.saturating_add(1);
        let AdamParams { beta1, beta2, epsilon } = self.params;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (li, layer) in layers.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[li], &mut self.v[li], &grads[li]);
            for i in 0..layer.weights.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                layer.weights[i] -= self.lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}
