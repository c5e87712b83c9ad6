//! Helpers for checking principal-component maps.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scribseg::backbone::TokenGrid;
use scribseg::featviz::{PcaFit, RgbRaster};
use scribseg::mask::LabelMask;

/// Largest `|c_i . c_j - delta_ij|` over the fitted components.
pub fn orthonormality_error(fit: &PcaFit) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = fit.components[i].iter().zip(&fit.components[j]).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - want).abs());
        }
    }
    worst
}

/// Tokens `mean + U V` with `U: n x 3`, `V: 3 x dim`, so exactly rank 3
/// after centring.
pub fn rank3_grid(seed: u64, rows: usize, cols: usize, dim: usize) -> TokenGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<Vec<f64>> = (0..3).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut grid = TokenGrid::zeros(rows, cols, dim);
    for t in grid.data.chunks_mut(dim) {
        let u: [f64; 3] = [rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)];
        for (d, out) in t.iter_mut().enumerate() {
            *out = (mean[d] + u[0] * v[0][d] + u[1] * v[1][d] + u[2] * v[2][d]) as f32;
        }
    }
    grid
}

/// Largest absolute error of `mean + scores * components` against the tokens.
pub fn reconstruction_error(grid: &TokenGrid, fit: &PcaFit) -> f64 {
    let mut worst = 0.0f64;
    for (t, s) in grid.data.chunks(grid.dim).zip(&fit.scores) {
        for d in 0..grid.dim {
            let r = fit.mean[d] + (0..3).map(|c| s[c] * fit.components[c][d]).sum::<f64>();
            worst = worst.max((r - t[d] as f64).abs());
        }
    }
    worst
}

/// `(within, between)`: the pixel-weighted mean of per-class RGB variance
/// and the pixel-weighted variance of the per-class RGB means.
pub fn texture_variances(map: &RgbRaster, truth: &LabelMask) -> (f64, f64) {
    assert_eq!((map.width, map.height), (truth.width(), truth.height()));
    let k = *truth.data().iter().max().unwrap() as usize + 1;
    let mut n = vec![0.0f64; k];
    let mut sum = vec![[0.0f64; 3]; k];
    let mut sq = vec![[0.0f64; 3]; k];
    for (i, &c) in truth.data().iter().enumerate() {
        let c = c as usize;
        n[c] += 1.0;
        for ch in 0..3 {
            let v = map.data[i * 3 + ch] as f64;
            sum[c][ch] += v;
            sq[c][ch] += v * v;
        }
    }
    let total: f64 = n.iter().sum();
    let mut grand = [0.0f64; 3];
    for c in 0..k {
        for ch in 0..3 {
            grand[ch] += sum[c][ch] / total;
        }
    }
    let (mut within, mut between) = (0.0, 0.0);
    for c in 0..k {
        if n[c] == 0.0 {
            continue;
        }
        for ch in 0..3 {
            let mean = sum[c][ch] / n[c];
            within += (sq[c][ch] / n[c] - mean * mean) * n[c] / total;
            between += (mean - grand[ch]).powi(2) * n[c] / total;
        }
    }
    (within, between)
}
