//! Stand-in tile predictors for blending tests.

#![allow(dead_code)]

use scribseg::decoder::ProbabilityMap;
use scribseg::image::ImagePlane;
use scribseg::tiler::{make_blend_mask, TileLayout, TilePredictor};
use scribseg::Result;

/// Ignores its input and returns the same class distribution everywhere.
pub struct Constant(pub Vec<f32>);

impl TilePredictor for Constant {
    fn predict_tile(&self, tile: &ImagePlane) -> Result<ProbabilityMap> {
        let n = tile.width() * tile.height();
        let data = self.0.iter().copied().cycle().take(n * self.0.len()).collect();
        ProbabilityMap::new(tile.height(), tile.width(), self.0.len(), data, tile.spacing_um)
    }
}

/// Two-class output that depends only on each pixel's own intensity, so any
/// tiling must reproduce the untiled result.
pub struct Pointwise;

impl TilePredictor for Pointwise {
    fn predict_tile(&self, tile: &ImagePlane) -> Result<ProbabilityMap> {
        let data = tile
            .data()
            .iter()
            .flat_map(|&v| {
                let p = 1.0 / (1.0 + (-4.0 * (v - 0.5)).exp());
                [1.0 - p, p]
            })
            .collect();
        ProbabilityMap::new(tile.height(), tile.width(), 2, data, tile.spacing_um)
    }
}

/// Smallest accumulated blend weight over the image for a layout.
pub fn min_weight_sum(layout: &TileLayout, eps: f64) -> f64 {
    let mask = make_blend_mask(layout.tile_w, layout.tile_h, eps);
    let mut sum = vec![0.0f64; layout.width * layout.height];
    for (x0, y0) in layout.origins() {
        for y in 0..layout.tile_h {
            for x in 0..layout.tile_w {
                sum[(y0 + y) * layout.width + x0 + x] += mask.data[y * layout.tile_w + x] as f64;
            }
        }
    }
    sum.into_iter().fold(f64::INFINITY, f64::min)
}

/// Deterministic gradient-plus-ripple test image.
pub fn test_image(w: usize, h: usize) -> ImagePlane {
    let data = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f32, (i / w) as f32);
            0.5 + 0.3 * (x * 0.05).sin() * (y * 0.031).cos() + 0.1 * ((x + 2.0 * y) * 0.2).sin()
        })
        .collect();
    ImagePlane::from_gray(w, h, data).unwrap()
}
