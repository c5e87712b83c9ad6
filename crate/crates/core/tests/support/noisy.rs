//! Noise-perturbed probability maps.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scribseg::decoder::ProbabilityMap;
use scribseg::tv::total_variation;

/// A smooth `k`-class map with uniform noise added per entry, renormalized.
pub fn noisy_map(seed: u64, w: usize, h: usize, k: usize, noise: f32) -> ProbabilityMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(w * h * k);
    for y in 0..h {
        for x in 0..w {
            let logits: Vec<f32> = (0..k)
                .map(|c| ((x as f32 * 0.07 + c as f32).sin() + (y as f32 * 0.05 * (c + 1) as f32).cos()) * 2.0)
                .collect();
            let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f32 = e.iter().sum();
            for v in e {
                data.push((v / s + rng.random_range(-noise..noise)).clamp(0.0, 1.0));
            }
        }
    }
    let mut p = ProbabilityMap::new(h, w, k, data, 1.0).unwrap();
    p.renormalize();
    p
}

/// Sum over classes of each channel's total variation.
pub fn map_tv(p: &ProbabilityMap) -> f64 {
    (0..p.num_classes)
        .map(|c| {
            let ch: Vec<f64> = p.channel(c).iter().map(|&v| v as f64).collect();
            total_variation(&ch, p.height, p.width)
        })
        .sum()
}
