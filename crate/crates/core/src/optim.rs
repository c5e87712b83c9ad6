//! AdamW with decoupled weight decay and a constant learning rate.

use crate::params::NamedParams;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// One update of `params` from `grads` (same layout).
    pub fn step<P: NamedParams, G: NamedParams>(&mut self, params: &mut P, grads: &G) {
        let grads = grads.flat();
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, wd, b1, b2, eps) = (self.lr, self.weight_decay, self.beta1, self.beta2, self.eps);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, theta| {
            let g = grads[i];
            let (m, v) = (&mut ms[i], &mut vs[i]);
            assert_eq!(theta.len(), g.len(), "parameter/gradient layout mismatch");
            for j in 0..theta.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= lr * wd * theta[j];
                theta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            i += 1;
        });
    }
}
