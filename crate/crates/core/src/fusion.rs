//! Multi-depth feature fusion.
//!
//! Each tapped level goes through a 1x1 projection to `proj_dim` channels, a
//! reflect-padded 3x3 refinement, and a bilinear resize to the fused grid;
//! the levels are then concatenated along channels in tap order.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, FeaturePyramid, PadPlan};
use crate::error::{Error, Result};
use crate::ops::{col2im3x3, im2col3x3, resize_bilinear, resize_bilinear_backward};
use crate::params::{seeded, Dense, NamedParams};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Channels per level after the 1x1 projection.
    pub proj_dim: usize,
    /// Pixels per fused cell; must divide the patch size.
    pub target_scale: usize,
    pub init_seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            proj_dim: 64,
            target_scale: 16,
            init_seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        if self.proj_dim == 0 {
            return Err(Error::Config("fusion proj_dim must be >= 1".into()));
        }
        if self.target_scale == 0 || !spec.patch_size.is_multiple_of(self.target_scale) {
            return Err(Error::Config(format!(
                "fusion target_scale {} must divide the patch size {}",
                self.target_scale, spec.patch_size
            )));
        }
        Ok(())
    }

    pub fn fused_channels(&self, levels: usize) -> usize {
        self.proj_dim * levels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams {
    /// `hidden_dim -> proj_dim`
    pub proj: Dense,
    /// `9 * proj_dim -> proj_dim`, rows ordered as in [`im2col3x3`].
    pub refine: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub levels: Vec<LevelParams>,
}

impl FusionParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|l| LevelParams {
                    proj: Dense::zeros(l.proj.in_dim, l.proj.out_dim),
                    refine: Dense::zeros(l.refine.in_dim, l.refine.out_dim),
                })
                .collect(),
        }
    }

    fn check(&self, pyramid: &FeaturePyramid, cfg: &FusionConfig) -> Result<()> {
        if self.levels.len() != pyramid.levels.len() {
            return Err(Error::Contract(format!(
                "fusion has {} level parameter sets, pyramid has {} levels",
                self.levels.len(),
                pyramid.levels.len()
            )));
        }
        let (rows, cols) = (pyramid.rows(), pyramid.cols());
        for (i, (lp, lvl)) in self.levels.iter().zip(&pyramid.levels).enumerate() {
            let t = &lvl.tokens;
            if t.rows != rows || t.cols != cols {
                return Err(Error::Contract(format!(
                    "pyramid level {i} is {}x{}, level 0 is {rows}x{cols}",
                    t.rows, t.cols
                )));
            }
            if lp.proj.in_dim != t.dim
                || lp.proj.out_dim != cfg.proj_dim
                || lp.refine.in_dim != 9 * cfg.proj_dim
                || lp.refine.out_dim != cfg.proj_dim
            {
                return Err(Error::Contract(format!(
                    "level {i} parameters do not match {}-dim tokens and proj_dim {}",
                    t.dim, cfg.proj_dim
                )));
            }
        }
        Ok(())
    }
}

impl NamedParams for FusionParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a [f32])) {
        for (i, l) in self.levels.iter().enumerate() {
            l.proj.visit_named(&format!("fusion.level{i}.proj"), f);
            l.refine.visit_named(&format!("fusion.level{i}.refine"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<f32>)) {
        for (i, l) in self.levels.iter_mut().enumerate() {
            l.proj.visit_named_mut(&format!("fusion.level{i}.proj"), f);
            l.refine.visit_named_mut(&format!("fusion.level{i}.refine"), f);
        }
    }
}

pub fn init_fusion_params(cfg: &FusionConfig, spec: &BackboneSpec, seed: u64) -> Result<FusionParams> {
    spec.validate()?;
    cfg.validate(spec)?;
    let mut rng = seeded(seed);
    let levels = spec
        .tap_layers
        .iter()
        .map(|_| LevelParams {
            proj: Dense::init(spec.hidden_dim, cfg.proj_dim, &mut rng),
            refine: Dense::init(9 * cfg.proj_dim, cfg.proj_dim, &mut rng),
        })
        .collect();
    Ok(FusionParams { levels })
}

/// `rows x cols x channels` fused features; each cell covers `scale` pixels
/// of the padded image.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMap {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub scale: usize,
    pub pad: PadPlan,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FusionCache {
    cols_per_level: Vec<Vec<f32>>,
}

pub fn fuse(pyramid: &FeaturePyramid, cfg: &FusionConfig, params: &FusionParams) -> Result<FusedMap> {
    fuse_impl(pyramid, cfg, params, false).map(|(m, _)| m)
}

pub fn fuse_with_cache(
    pyramid: &FeaturePyramid,
    cfg: &FusionConfig,
    params: &FusionParams,
) -> Result<(FusedMap, FusionCache)> {
    fuse_impl(pyramid, cfg, params, true).map(|(m, c)| (m, c.expect("cache requested")))
}

fn target_grid(pyramid: &FeaturePyramid, cfg: &FusionConfig) -> (usize, usize) {
    (pyramid.pad.rows(cfg.target_scale), pyramid.pad.cols(cfg.target_scale))
}

fn fuse_impl(
    pyramid: &FeaturePyramid,
    cfg: &FusionConfig,
    params: &FusionParams,
    keep: bool,
) -> Result<(FusedMap, Option<FusionCache>)> {
    if pyramid.levels.is_empty() {
        return Err(Error::Contract("empty feature pyramid".into()));
    }
    if cfg.target_scale == 0 || !pyramid.patch_size.is_multiple_of(cfg.target_scale) {
        return Err(Error::Config(format!(
            "fusion target_scale {} must divide the patch size {}",
            cfg.target_scale, pyramid.patch_size
        )));
    }
    params.check(pyramid, cfg)?;
    let (rows, cols) = (pyramid.rows(), pyramid.cols());
    let n = rows * cols;
    let p = cfg.proj_dim;
    let levels = pyramid.levels.len();
    let (trows, tcols) = target_grid(pyramid, cfg);
    let channels = p * levels;
    let mut fused = vec![0.0f32; trows * tcols * channels];
    let mut cache = keep.then(|| FusionCache {
        cols_per_level: Vec::with_capacity(levels),
    });

    for (li, (lvl, lp)) in pyramid.levels.iter().zip(&params.levels).enumerate() {
        let projected = lp.proj.forward(&lvl.tokens.data, n);
        let col = im2col3x3(&projected, rows, cols, p);
        let refined = lp.refine.forward(&col, n);
        let up = resize_bilinear(&refined, rows, cols, p, trows, tcols);
        for (dst, src) in fused.chunks_exact_mut(channels).zip(up.chunks_exact(p)) {
            dst[li * p..(li + 1) * p].copy_from_slice(src);
        }
        if let Some(c) = cache.as_mut() {
            c.cols_per_level.push(col);
        }
    }
    Ok((
        FusedMap {
            rows: trows,
            cols: tcols,
            channels,
            data: fused,
            scale: cfg.target_scale,
            pad: pyramid.pad,
        },
        cache,
    ))
}

/// Accumulates parameter gradients for `d_fused = dL/dFused` into `grads`.
pub fn fuse_backward(
    pyramid: &FeaturePyramid,
    cfg: &FusionConfig,
    params: &FusionParams,
    cache: &FusionCache,
    d_fused: &[f32],
    grads: &mut FusionParams,
) {
    let (rows, cols) = (pyramid.rows(), pyramid.cols());
    let n = rows * cols;
    let p = cfg.proj_dim;
    let channels = p * pyramid.levels.len();
    let (trows, tcols) = target_grid(pyramid, cfg);
    for (li, lvl) in pyramid.levels.iter().enumerate() {
        let lp = &params.levels[li];
        let g = &mut grads.levels[li];
        let d_up: Vec<f32> = d_fused
            .chunks_exact(channels)
            .flat_map(|cell| cell[li * p..(li + 1) * p].iter().copied())
            .collect();
        let d_refined = resize_bilinear_backward(&d_up, rows, cols, p, trows, tcols);
        let d_col = lp
            .refine
            .backward(&cache.cols_per_level[li], &d_refined, n, &mut g.refine, true)
            .expect("input grad requested");
        let d_proj = col2im3x3(&d_col, rows, cols, p);
        lp.proj
            .backward(&lvl.tokens.data, &d_proj, n, &mut g.proj, false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{FeatureLevel, TokenGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pyramid(levels: &[usize], rows: usize, cols: usize, dim: usize, seed: u64) -> FeaturePyramid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeaturePyramid {
            levels: levels
                .iter()
                .map(|&layer| FeatureLevel {
                    layer,
                    tokens: TokenGrid {
                        rows,
                        cols,
                        dim,
                        data: (0..rows * cols * dim)
                            .map(|_| rng.random_range(-1.0..1.0))
                            .collect(),
                    },
                })
                .collect(),
            pad: PadPlan::new(rows * 16, cols * 16, 16),
            patch_size: 16,
        }
    }

    fn spec(dim: usize, taps: Vec<usize>) -> BackboneSpec {
        BackboneSpec {
            hidden_dim: dim,
            tap_layers: taps,
            ..BackboneSpec::default()
        }
    }

    #[test]
    fn four_levels_concatenate() {
        let s = spec(32, vec![3, 6, 9, 12]);
        let cfg = FusionConfig {
            proj_dim: 16,
            ..FusionConfig::default()
        };
        let params = init_fusion_params(&cfg, &s, 1).unwrap();
        let pyr = random_pyramid(&[3, 6, 9, 12], 8, 8, 32, 0);
        let m = fuse(&pyr, &cfg, &params).unwrap();
        assert_eq!((m.rows, m.cols, m.channels), (8, 8, 64));
        assert!(m.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_level_has_proj_dim_channels() {
        let s = spec(12, vec![6]);
        let cfg = FusionConfig {
            proj_dim: 8,
            ..FusionConfig::default()
        };
        let params = init_fusion_params(&cfg, &s, 3).unwrap();
        let m = fuse(&random_pyramid(&[6], 4, 5, 12, 1), &cfg, &params).unwrap();
        assert_eq!(m.channels, 8);
    }

    #[test]
    fn identity_projection_on_constant_pyramid_is_constant() {
        let dim = 4;
        let s = spec(dim, vec![3]);
        let cfg = FusionConfig {
            proj_dim: dim,
            ..FusionConfig::default()
        };
        let mut params = init_fusion_params(&cfg, &s, 0).unwrap();
        let lp = &mut params.levels[0];
        lp.proj.weight.iter_mut().for_each(|w| *w = 0.0);
        for i in 0..dim {
            lp.proj.weight[i * dim + i] = 1.0;
        }
        // refinement keeps its random weights; reflect padding makes every
        // neighbourhood of a constant field identical
        let mut pyr = random_pyramid(&[3], 6, 7, dim, 0);
        let tok = [0.3f32, -1.0, 2.0, 0.0];
        for chunk in pyr.levels[0].tokens.data.chunks_exact_mut(dim) {
            chunk.copy_from_slice(&tok);
        }
        let m = fuse(&pyr, &cfg, &params).unwrap();
        let first = m.data[..m.channels].to_vec();
        for cell in m.data.chunks_exact(m.channels) {
            for (a, b) in cell.iter().zip(&first) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn init_determinism_and_rejection() {
        let s = spec(16, vec![3, 6]);
        let cfg = FusionConfig::default();
        assert_eq!(
            init_fusion_params(&cfg, &s, 5).unwrap(),
            init_fusion_params(&cfg, &s, 5).unwrap()
        );
        assert_ne!(
            init_fusion_params(&cfg, &s, 5).unwrap(),
            init_fusion_params(&cfg, &s, 6).unwrap()
        );
        let zero = FusionConfig {
            proj_dim: 0,
            ..cfg.clone()
        };
        assert!(init_fusion_params(&zero, &s, 5).is_err());
        let p = init_fusion_params(&cfg, &s, 5).unwrap();
        assert!(p.levels.iter().all(|l| l.proj.bias.iter().all(|&b| b == 0.0)
            && l.refine.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let s = spec(16, vec![3, 6]);
        let cfg = FusionConfig::default();
        let params = init_fusion_params(&cfg, &s, 0).unwrap();
        let pyr = random_pyramid(&[3, 6], 4, 4, 12, 0);
        assert!(matches!(fuse(&pyr, &cfg, &params), Err(Error::Contract(_))));
        let pyr = random_pyramid(&[3], 4, 4, 16, 0);
        assert!(matches!(fuse(&pyr, &cfg, &params), Err(Error::Contract(_))));
    }

    #[test]
    fn swapping_levels_permutes_channel_blocks() {
        let s = spec(8, vec![3, 6]);
        let cfg = FusionConfig {
            proj_dim: 4,
            ..FusionConfig::default()
        };
        let params = init_fusion_params(&cfg, &s, 9).unwrap();
        let pyr = random_pyramid(&[3, 6], 5, 5, 8, 2);
        let a = fuse(&pyr, &cfg, &params).unwrap();
        let mut pyr_sw = pyr.clone();
        pyr_sw.levels.swap(0, 1);
        let mut params_sw = params.clone();
        params_sw.levels.swap(0, 1);
        let b = fuse(&pyr_sw, &cfg, &params_sw).unwrap();
        for (ca, cb) in a.data.chunks_exact(8).zip(b.data.chunks_exact(8)) {
            assert_eq!(&ca[..4], &cb[4..]);
            assert_eq!(&ca[4..], &cb[..4]);
        }
    }

    #[test]
    fn token_change_stays_within_refinement_window() {
        let s = spec(6, vec![3]);
        let cfg = FusionConfig {
            proj_dim: 3,
            ..FusionConfig::default()
        };
        let params = init_fusion_params(&cfg, &s, 4).unwrap();
        let pyr = random_pyramid(&[3], 9, 9, 6, 5);
        let base = fuse(&pyr, &cfg, &params).unwrap();
        let mut bumped = pyr.clone();
        bumped.levels[0].tokens.token_mut(4, 4)[2] += 5.0;
        let after = fuse(&bumped, &cfg, &params).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                let i = (r * 9 + c) * 3;
                let changed = base.data[i..i + 3] != after.data[i..i + 3];
                let inside = r.abs_diff(4) <= 1 && c.abs_diff(4) <= 1;
                assert_eq!(changed, inside, "cell ({r},{c})");
            }
        }
    }

    #[test]
    fn finer_target_scale_upsamples() {
        let s = spec(8, vec![3]);
        let cfg = FusionConfig {
            proj_dim: 2,
            target_scale: 8,
            init_seed: 0,
        };
        let params = init_fusion_params(&cfg, &s, 0).unwrap();
        let m = fuse(&random_pyramid(&[3], 3, 4, 8, 0), &cfg, &params).unwrap();
        assert_eq!((m.rows, m.cols, m.scale), (6, 8, 8));
    }
}
