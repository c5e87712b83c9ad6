//! Per-cell MLP head and conversion of cell logits to pixel probabilities.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PadPlan;
use crate::error::{Error, Result};
use crate::fusion::FusedMap;
use crate::mask::LabelMask;
use crate::ops::linear_taps;
use crate::params::{seeded, Dense, NamedParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub hidden_sizes: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f32,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![256],
            num_classes: 2,
            dropout_rate: 0.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "decoder needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("decoder hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// Hidden layers followed by the output layer.
    pub layers: Vec<Dense>,
}

impl DecoderParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|d| Dense::zeros(d.in_dim, d.out_dim))
                .collect(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("decoder has layers").out_dim
    }

    /// Re-initializes only the output layer for a new class count.
    pub fn reset_output_layer(&mut self, num_classes: usize, seed: u64) {
        let last = self.layers.last_mut().expect("decoder has layers");
        *last = Dense::init(last.in_dim, num_classes, &mut seeded(seed));
    }
}

impl NamedParams for DecoderParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a [f32])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_named(&format!("decoder.layer{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<f32>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_named_mut(&format!("decoder.layer{i}"), f);
        }
    }
}

pub fn init_decoder_params(cfg: &DecoderConfig, in_channels: usize, seed: u64) -> Result<DecoderParams> {
    cfg.validate()?;
    let mut rng = seeded(seed);
    let mut widths = vec![in_channels];
    widths.extend(&cfg.hidden_sizes);
    widths.push(cfg.num_classes);
    let layers = widths
        .windows(2)
        .map(|w| Dense::init(w[0], w[1], &mut rng))
        .collect();
    Ok(DecoderParams { layers })
}

/// Class logits on the fused grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid {
    pub rows: usize,
    pub cols: usize,
    pub num_classes: usize,
    pub data: Vec<f32>,
    /// Pixels per cell.
    pub scale: usize,
    pub pad: PadPlan,
}

/// Intermediates for the backward pass.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    /// Input to every layer.
    inputs: Vec<Vec<f32>>,
    /// Per hidden layer: dropout multipliers (empty when dropout is off).
    dropout: Vec<Vec<f32>>,
}

pub fn decode(fused: &FusedMap, params: &DecoderParams, cfg: &DecoderConfig) -> Result<LogitsGrid> {
    decode_impl(fused, params, cfg, None).map(|(l, _)| l)
}

/// Training-mode forward: applies dropout from `rng` and keeps a cache.
pub fn decode_train(
    fused: &FusedMap,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LogitsGrid, DecoderCache)> {
    decode_impl(fused, params, cfg, Some(rng)).map(|(l, c)| (l, c.expect("cache kept")))
}

fn decode_impl(
    fused: &FusedMap,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(LogitsGrid, Option<DecoderCache>)> {
    if params.in_channels() != fused.channels {
        return Err(Error::Contract(format!(
            "decoder expects {} channels, fused map has {}",
            params.in_channels(),
            fused.channels
        )));
    }
    let n = fused.rows * fused.cols;
    let training = rng.is_some();
    let mut rng = rng;
    let mut cache = training.then(|| DecoderCache {
        inputs: Vec::with_capacity(params.layers.len()),
        dropout: Vec::new(),
    });
    let mut act = fused.data.clone();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut out = layer.forward(&act, n);
        if let Some(c) = cache.as_mut() {
            c.inputs.push(std::mem::take(&mut act));
        }
        if i < last {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            if let (Some(c), Some(r)) = (cache.as_mut(), rng.as_deref_mut()) {
                let keep = 1.0 - cfg.dropout_rate;
                let mult: Vec<f32> = if cfg.dropout_rate > 0.0 {
                    (0..out.len())
                        .map(|_| if r.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                        .collect()
                } else {
                    Vec::new()
                };
                if !mult.is_empty() {
                    out.iter_mut().zip(&mult).for_each(|(v, m)| *v *= m);
                }
                c.dropout.push(mult);
            }
        }
        act = out;
    }
    Ok((
        LogitsGrid {
            rows: fused.rows,
            cols: fused.cols,
            num_classes: params.num_classes(),
            data: act,
            scale: fused.scale,
            pad: fused.pad,
        },
        cache,
    ))
}

/// Accumulates decoder gradients and returns `dL/dFused`.
pub fn decode_backward(
    params: &DecoderParams,
    cache: &DecoderCache,
    d_logits: &[f32],
    grads: &mut DecoderParams,
) -> Vec<f32> {
    let n = d_logits.len() / params.num_classes();
    let mut delta = d_logits.to_vec();
    for i in (0..params.layers.len()).rev() {
        let input = &cache.inputs[i];
        let d_in = params.layers[i]
            .backward(input, &delta, n, &mut grads.layers[i], true)
            .expect("input grad requested");
        if i == 0 {
            return d_in;
        }
        // input[i] is the (dropped-out) ReLU output of layer i-1
        let mult = &cache.dropout[i - 1];
        delta = d_in
            .iter()
            .zip(input)
            .enumerate()
            .map(|(j, (&g, &a))| {
                if a > 0.0 {
                    if mult.is_empty() {
                        g
                    } else {
                        g * mult[j]
                    }
                } else {
                    0.0
                }
            })
            .collect();
    }
    unreachable!("decoder has at least one layer")
}

/// Per-pixel class probabilities, `height x width x num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub data: Vec<f32>,
    pub spacing_um: f64,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f32>, spacing_um: f64) -> Result<Self> {
        if data.len() != height * width * num_classes {
            return Err(Error::Contract(format!(
                "probability buffer holds {} values, {height}x{width}x{num_classes} needs {}",
                data.len(),
                height * width * num_classes
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
            spacing_um,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.num_classes;
        &self.data[i..i + self.num_classes]
    }

    /// Rescales every pixel's class vector to sum to 1; an all-zero vector
    /// becomes uniform.
    pub fn renormalize(&mut self) {
        let k = self.num_classes;
        for px in self.data.chunks_exact_mut(k) {
            let s: f64 = px.iter().map(|&v| v.max(0.0) as f64).sum();
            if s > 0.0 {
                for v in px.iter_mut() {
                    *v = (v.max(0.0) as f64 / s) as f32;
                }
            } else {
                px.iter_mut().for_each(|v| *v = 1.0 / k as f32);
            }
        }
    }

    /// Largest deviation of any pixel's class sum from 1.
    pub fn max_sum_error(&self) -> f64 {
        self.data
            .chunks_exact(self.num_classes)
            .map(|px| (px.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Single class channel as a dense `height x width` plane.
    pub fn channel(&self, k: usize) -> Vec<f32> {
        self.data
            .chunks_exact(self.num_classes)
            .map(|px| px[k])
            .collect()
    }

    pub fn set_channel(&mut self, k: usize, values: &[f32]) {
        for (px, &v) in self.data.chunks_exact_mut(self.num_classes).zip(values) {
            px[k] = v;
        }
    }
}

fn softmax_cells(logits: &LogitsGrid) -> Vec<f32> {
    let k = logits.num_classes;
    let mut out = vec![0.0f32; logits.data.len()];
    for (src, dst) in logits.data.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = src.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut s = 0.0f64;
        for (d, &z) in dst.iter_mut().zip(src) {
            let e = (z as f64 - m).exp();
            *d = e as f32;
            s += e;
        }
        dst.iter_mut().for_each(|d| *d = (*d as f64 / s) as f32);
    }
    out
}

/// Softmax per cell, bilinear upsampling to the padded pixel grid, and a
/// crop back to the unpadded source window.
pub fn to_pixel_probabilities(logits: &LogitsGrid, spacing_um: f64) -> Result<ProbabilityMap> {
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite logits".into()));
    }
    let k = logits.num_classes;
    let probs = softmax_cells(logits);
    let pad = logits.pad;
    let ty = linear_taps(logits.rows, logits.rows * logits.scale);
    let tx = linear_taps(logits.cols, logits.cols * logits.scale);
    let (h, w) = (pad.source_h, pad.source_w);
    let mut data = vec![0.0f32; h * w * k];
    let cols = logits.cols;
    for y in 0..h {
        let a = ty[y + pad.top];
        for x in 0..w {
            let b = tx[x + pad.left];
            let w00 = (1.0 - a.frac) * (1.0 - b.frac);
            let w01 = (1.0 - a.frac) * b.frac;
            let w10 = a.frac * (1.0 - b.frac);
            let w11 = a.frac * b.frac;
            let p00 = (a.i0 * cols + b.i0) * k;
            let p01 = (a.i0 * cols + b.i1) * k;
            let p10 = (a.i1 * cols + b.i0) * k;
            let p11 = (a.i1 * cols + b.i1) * k;
            let dst = (y * w + x) * k;
            for c in 0..k {
                data[dst + c] = w00 * probs[p00 + c]
                    + w01 * probs[p01 + c]
                    + w10 * probs[p10 + c]
                    + w11 * probs[p11 + c];
            }
        }
    }
    let mut map = ProbabilityMap::new(h, w, k, data, spacing_um)?;
    map.renormalize();
    Ok(map)
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_mask(prob: &ProbabilityMap) -> LabelMask {
    let data = prob
        .data
        .chunks_exact(prob.num_classes)
        .map(|px| {
            let mut best = 0usize;
            for (i, &v) in px.iter().enumerate().skip(1) {
                if v > px[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(prob.width, prob.height, data).expect("shape consistent")
}
