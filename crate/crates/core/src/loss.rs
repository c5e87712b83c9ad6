//! Combined focal cross-entropy, soft Dice and L2 weight penalty.
//!
//! All functions take logits as a flat `cells x classes` buffer in `f64` and
//! evaluate only cells whose target is not the ignore label. Gradients are
//! analytic.

use serde::{Deserialize, Serialize};

use crate::decoder::LogitsGrid;
use crate::error::{Error, Result};
use crate::mask::IGNORE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focal exponent; 0 reduces to plain cross-entropy.
    pub gamma: f64,
    pub lambda_dice: f64,
    pub lambda_w: f64,
    /// Additive smoothing in the Dice ratio.
    pub dice_smooth: f64,
    pub ignore_index: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            lambda_dice: 0.33,
            lambda_w: 1e-4,
            dice_smooth: 1.0,
            ignore_index: IGNORE,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.lambda_dice >= 0.0 && self.lambda_w >= 0.0) {
            return Err(Error::Config(
                "gamma, lambda_dice and lambda_w must be non-negative".into(),
            ));
        }
        if self.dice_smooth <= 0.0 || !self.dice_smooth.is_finite() {
            return Err(Error::Config("dice_smooth must be positive".into()));
        }
        Ok(())
    }
}

/// Cell labels aligned with a logits grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisionGrid {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u8>,
}

impl SupervisionGrid {
    pub fn supervised_cells(&self, ignore: u8) -> usize {
        self.labels.iter().filter(|&&l| l != ignore).count()
    }
}

/// A scalar loss and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_inputs(logits: &[f64], k: usize, target: &[u8], cfg: &LossConfig) -> Result<usize> {
    if k == 0 || logits.len() != target.len() * k {
        return Err(Error::Contract(format!(
            "{} logits do not match {} cells x {k} classes",
            logits.len(),
            target.len()
        )));
    }
    let mut supervised = 0;
    for &t in target {
        if t == cfg.ignore_index {
            continue;
        }
        if t as usize >= k {
            return Err(Error::Contract(format!(
                "target label {t} outside 0..{k}"
            )));
        }
        supervised += 1;
    }
    if supervised == 0 {
        return Err(Error::Supervision(
            "every cell is unlabeled; draw at least one scribble".into(),
        ));
    }
    Ok(supervised)
}

/// Writes `softmax(z)` into `p` and returns `log p`.
fn softmax_into(z: &[f64], p: &mut [f64], logp: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    for ((pi, li), &zi) in p.iter_mut().zip(logp.iter_mut()).zip(z) {
        *li = zi - lse;
        *pi = li.exp();
    }
}

/// Mean over supervised cells of `-(1 - p_t)^gamma * ln p_t`.
pub fn focal_ce(logits: &[f64], k: usize, target: &[u8], cfg: &LossConfig) -> Result<LossValue> {
    let n = check_inputs(logits, k, target, cfg)? as f64;
    let g = cfg.gamma;
    let mut grad = vec![0.0; logits.len()];
    let mut value = 0.0;
    let mut p = vec![0.0; k];
    let mut logp = vec![0.0; k];
    for (cell, &t) in target.iter().enumerate() {
        if t == cfg.ignore_index {
            continue;
        }
        let t = t as usize;
        let z = &logits[cell * k..(cell + 1) * k];
        softmax_into(z, &mut p, &mut logp);
        let pt = p[t];
        let one_minus = (1.0 - pt).max(0.0);
        let modulator = if g == 0.0 { 1.0 } else { one_minus.powf(g) };
        value -= modulator * logp[t];
        // dL/dz_j = [g (1-pt)^(g-1) pt ln pt - (1-pt)^g] (delta_tj - p_j)
        let lead = if g == 0.0 || one_minus == 0.0 {
            0.0
        } else {
            g * one_minus.powf(g - 1.0) * pt * logp[t]
        };
        let coef = (lead - modulator) / n;
        let gcell = &mut grad[cell * k..(cell + 1) * k];
        for j in 0..k {
            let delta = if j == t { 1.0 } else { 0.0 };
            gcell[j] = coef * (delta - p[j]);
        }
    }
    Ok(LossValue {
        value: value / n,
        grad,
    })
}

/// `1 - mean_k (2 sum p_k y_k + eps) / (sum p_k + sum y_k + eps)` over the
/// classes present among supervised cells.
pub fn soft_dice(logits: &[f64], k: usize, target: &[u8], cfg: &LossConfig) -> Result<LossValue> {
    check_inputs(logits, k, target, cfg)?;
    let eps = cfg.dice_smooth;
    let cells = target.len();
    let mut probs = vec![0.0; logits.len()];
    let mut logp = vec![0.0; k];
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut ysum = vec![0.0; k];
    for cell in 0..cells {
        let t = target[cell];
        if t == cfg.ignore_index {
            continue;
        }
        let p = &mut probs[cell * k..(cell + 1) * k];
        softmax_into(&logits[cell * k..(cell + 1) * k], p, &mut logp);
        for j in 0..k {
            psum[j] += p[j];
        }
        inter[t as usize] += p[t as usize];
        ysum[t as usize] += 1.0;
    }
    let present: Vec<usize> = (0..k).filter(|&j| ysum[j] > 0.0).collect();
    let c = present.len() as f64;
    let mut mean_ratio = 0.0;
    // dL/dp_nj for present classes j: -(1/C) [2 y_nj S_j - (2 I_j + eps)] / S_j^2
    // where S_j = sum p_j + sum y_j + eps.
    let mut dp_base = vec![0.0; k];
    let mut dp_hit = vec![0.0; k];
    for &j in &present {
        let s = psum[j] + ysum[j] + eps;
        let num = 2.0 * inter[j] + eps;
        mean_ratio += num / s;
        dp_base[j] = (num / (s * s)) / c;
        dp_hit[j] = -(2.0 / s) / c;
    }
    mean_ratio /= c;
    let mut grad = vec![0.0; logits.len()];
    for cell in 0..cells {
        let t = target[cell];
        if t == cfg.ignore_index {
            continue;
        }
        let p = &probs[cell * k..(cell + 1) * k];
        let mut dp = dp_base.clone();
        dp[t as usize] += dp_hit[t as usize];
        let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
        for j in 0..k {
            grad[cell * k + j] = p[j] * (dp[j] - dot);
        }
    }
    Ok(LossValue {
        value: 1.0 - mean_ratio,
        grad,
    })
}

/// Value and gradients of the combined objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub focal: f64,
    pub dice: f64,
    /// Unweighted `sum ||theta||^2`.
    pub l2: f64,
    pub grad_logits: Vec<f64>,
    /// `2 * lambda_w * theta` per parameter tensor.
    pub grad_params: Vec<Vec<f64>>,
}

/// Focal + lambda_dice * Dice on the logits, plus lambda_w * sum of squared
/// trainable parameters.
pub fn total_loss<P, T>(
    logits: &[f64],
    k: usize,
    target: &[u8],
    params: &[P],
    cfg: &LossConfig,
) -> Result<TotalLoss>
where
    P: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    cfg.validate()?;
    let focal = focal_ce(logits, k, target, cfg)?;
    let (dice_value, dice_grad) = if cfg.lambda_dice > 0.0 {
        let d = soft_dice(logits, k, target, cfg)?;
        (d.value, Some(d.grad))
    } else {
        (soft_dice(logits, k, target, cfg)?.value, None)
    };
    let mut grad_logits = focal.grad;
    if let Some(dg) = dice_grad {
        for (g, d) in grad_logits.iter_mut().zip(dg) {
            *g += cfg.lambda_dice * d;
        }
    }
    let mut l2 = 0.0;
    let grad_params = params
        .iter()
        .map(|t| {
            t.as_ref()
                .iter()
                .map(|&v| {
                    let v: f64 = v.into();
                    l2 += v * v;
                    2.0 * cfg.lambda_w * v
                })
                .collect()
        })
        .collect();
    Ok(TotalLoss {
        value: focal.value + cfg.lambda_dice * dice_value + cfg.lambda_w * l2,
        focal: focal.value,
        dice: dice_value,
        l2,
        grad_logits,
        grad_params,
    })
}

fn grid_inputs(logits: &LogitsGrid, target: &SupervisionGrid) -> Result<Vec<f64>> {
    if logits.rows != target.rows || logits.cols != target.cols {
        return Err(Error::Contract(format!(
            "logits grid {}x{} vs supervision grid {}x{}",
            logits.rows, logits.cols, target.rows, target.cols
        )));
    }
    Ok(logits.data.iter().map(|&v| v as f64).collect())
}

pub fn focal_ce_grid(logits: &LogitsGrid, target: &SupervisionGrid, cfg: &LossConfig) -> Result<LossValue> {
    focal_ce(&grid_inputs(logits, target)?, logits.num_classes, &target.labels, cfg)
}

pub fn soft_dice_grid(logits: &LogitsGrid, target: &SupervisionGrid, cfg: &LossConfig) -> Result<LossValue> {
    soft_dice(&grid_inputs(logits, target)?, logits.num_classes, &target.labels, cfg)
}
