//! Trainable dense layers and named parameter views.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ops::gemm;

/// Affine map `y = x W + b` applied row-wise; `weight` is `in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Forward over `n` rows of `x`.
    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        let mut y = Vec::with_capacity(n * self.out_dim);
        for _ in 0..n {
            y.extend_from_slice(&self.bias);
        }
        gemm(
            n,
            self.in_dim,
            self.out_dim,
            1.0,
            x,
            false,
            &self.weight,
            false,
            1.0,
            &mut y,
        );
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when
    /// `want_input_grad` is set.
    pub fn backward(
        &self,
        x: &[f32],
        dy: &[f32],
        n: usize,
        grad: &mut Dense,
        want_input_grad: bool,
    ) -> Option<Vec<f32>> {
        gemm(
            self.in_dim,
            n,
            self.out_dim,
            1.0,
            x,
            true,
            dy,
            false,
            1.0,
            &mut grad.weight,
        );
        for row in dy.chunks_exact(self.out_dim) {
            for (g, d) in grad.bias.iter_mut().zip(row) {
                *g += d;
            }
        }
        want_input_grad.then(|| {
            let mut dx = vec![0.0f32; n * self.in_dim];
            gemm(
                n,
                self.out_dim,
                self.in_dim,
                1.0,
                dy,
                false,
                &self.weight,
                true,
                0.0,
                &mut dx,
            );
            dx
        })
    }
}

pub(crate) fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named flat views over a parameter collection, in a stable order.
pub trait NamedParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a [f32]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<f32>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn sum_squares(&self) -> f64 {
        let mut s = 0.0f64;
        self.visit(&mut |_, t| s += t.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>());
        s
    }

    fn flat(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }
}

impl Dense {
    pub(crate) fn visit_named<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [f32])) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub(crate) fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_forward_backward_small() {
        let mut d = Dense::zeros(2, 3);
        d.weight = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        d.bias = vec![0.5, 0.0, -0.5];
        let x = vec![1.0, -1.0];
        assert_eq!(d.forward(&x, 1), vec![-2.5, -3.0, -3.5]);
        let mut g = Dense::zeros(2, 3);
        let dx = d.backward(&x, &[1.0, 0.0, 1.0], 1, &mut g, true).unwrap();
        assert_eq!(g.weight, vec![1.0, 0.0, 1.0, -1.0, 0.0, -1.0]);
        assert_eq!(g.bias, vec![1.0, 0.0, 1.0]);
        assert_eq!(dx, vec![4.0, 10.0]);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = Dense::init(16, 4, &mut seeded(7));
        let b = Dense::init(16, 4, &mut seeded(7));
        assert_eq!(a, b);
        assert!(a.weight.iter().all(|w| w.abs() <= 0.25));
        assert!(a.bias.iter().all(|&b| b == 0.0));
    }
}
