//! Central finite-difference check of the combined loss.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scribseg::loss::{total_loss, LossConfig};
use scribseg::mask::IGNORE;

pub const STEP: f64 = 1e-4;

/// Per-component `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub struct Instance {
    pub logits: Vec<f64>,
    pub k: usize,
    pub target: Vec<u8>,
    pub params: Vec<Vec<f64>>,
    pub cfg: LossConfig,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=5);
    let cells = rng.random_range(1..=40);
    let logits = (0..cells * k).map(|_| rng.random_range(-4.0..4.0)).collect();
    let mut target: Vec<u8> = (0..cells)
        .map(|_| if rng.random_bool(0.25) { IGNORE } else { rng.random_range(0..k as u8) })
        .collect();
    target[0] = rng.random_range(0..k as u8);
    let params = (0..rng.random_range(1..=3))
        .map(|_| (0..rng.random_range(1..=8)).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let cfg = LossConfig {
        gamma: [0.0, 1.0, 2.0, 2.0, 3.0][rng.random_range(0..5)],
        lambda_dice: rng.random_range(0.0..1.0),
        lambda_w: rng.random_range(0.0..0.1),
        ..LossConfig::default()
    };
    Instance { logits, k, target, params, cfg }
}

fn value(inst: &Instance, logits: &[f64], params: &[Vec<f64>]) -> f64 {
    total_loss(logits, inst.k, &inst.target, params, &inst.cfg).unwrap().value
}

/// Largest relative error over every logit and parameter of the instance.
pub fn max_rel_error(inst: &Instance, floor: f64) -> f64 {
    let analytic = total_loss(&inst.logits, inst.k, &inst.target, &inst.params, &inst.cfg).unwrap();
    let mut worst = 0.0f64;
    let mut z = inst.logits.clone();
    for i in 0..z.len() {
        let orig = z[i];
        z[i] = orig + STEP;
        let up = value(inst, &z, &inst.params);
        z[i] = orig - STEP;
        let down = value(inst, &z, &inst.params);
        z[i] = orig;
        worst = worst.max(rel_err(analytic.grad_logits[i], (up - down) / (2.0 * STEP), floor));
    }
    let mut p = inst.params.clone();
    for t in 0..p.len() {
        for i in 0..p[t].len() {
            let orig = p[t][i];
            p[t][i] = orig + STEP;
            let up = value(inst, &inst.logits, &p);
            p[t][i] = orig - STEP;
            let down = value(inst, &inst.logits, &p);
            p[t][i] = orig;
            worst = worst.max(rel_err(analytic.grad_params[t][i], (up - down) / (2.0 * STEP), floor));
        }
    }
    worst
}

/// Mean softmax cross-entropy over non-ignored cells, written directly.
pub fn plain_ce(logits: &[f64], k: usize, target: &[u8]) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for (c, &t) in target.iter().enumerate() {
        if t == IGNORE {
            continue;
        }
        let z = &logits[c * k..(c + 1) * k];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        s += lse - z[t as usize];
        n += 1.0;
    }
    s / n
}
