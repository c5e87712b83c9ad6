//! Overlapping-tile inference for images larger than one training window.
//!
//! Each tile's probabilities are weighted by a radial mask that peaks at the
//! tile centre, summed into full-image buffers in layout order, and divided
//! by the summed weights. Optional total-variation smoothing runs once on the
//! stitched map.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::decoder::ProbabilityMap;
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::model::SegmentationModel;
use crate::tv::denoise_tv_chambolle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileConfig {
    pub tile_size: usize,
    pub overlap: f64,
    pub eps_blend: f64,
    pub tv_weight: f64,
    pub tv_max_iter: usize,
    pub tv_eps: f64,
    /// Tiles with more pixels than this fail as out of memory and are split.
    pub max_tile_pixels: Option<usize>,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            tile_size: 512,
            overlap: 0.5,
            eps_blend: 0.01,
            tv_weight: 0.1,
            tv_max_iter: 50,
            tv_eps: 2e-4,
            max_tile_pixels: None,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 2 {
            return Err(Error::Config(format!("tile_size {} is below 2", self.tile_size)));
        }
        if !(self.overlap > 0.0 && self.overlap < 1.0) {
            return Err(Error::Config(format!("overlap {} must lie in (0, 1)", self.overlap)));
        }
        if !(self.eps_blend > 0.0 && self.eps_blend <= 1.0) {
            return Err(Error::Config(format!("eps_blend {} must lie in (0, 1]", self.eps_blend)));
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return Err(Error::Config(format!("tv_weight {} must be non-negative", self.tv_weight)));
        }
        if self.tv_eps.is_nan() || self.tv_eps <= 0.0 {
            return Err(Error::Config("tv_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Tile origins over an image. Tiles are `tile_size` square, shrunk to the
/// image extent when the image is smaller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileLayout {
    pub width: usize,
    pub height: usize,
    pub tile_w: usize,
    pub tile_h: usize,
    pub stride: usize,
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
}

/// Starts `0, stride, 2*stride, ...` while the tile stays inside, then one
/// final tile flush with the far border.
fn axis_starts(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    if extent <= tile {
        return vec![0];
    }
    let mut v = Vec::new();
    let mut s = 0;
    while s + tile < extent {
        v.push(s);
        s += stride;
    }
    v.push(extent - tile);
    v.dedup();
    v
}

impl TileLayout {
    pub fn new(width: usize, height: usize, tile_size: usize, overlap: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input("cannot tile an empty image".into()));
        }
        if tile_size < 2 || !(overlap > 0.0 && overlap < 1.0) {
            return Err(Error::Config(format!(
                "invalid tiling: tile {tile_size}, overlap {overlap}"
            )));
        }
        let stride = ((tile_size as f64 * (1.0 - overlap)).round() as usize).max(1);
        let (tile_w, tile_h) = (tile_size.min(width), tile_size.min(height));
        Ok(Self {
            width,
            height,
            tile_w,
            tile_h,
            stride,
            xs: axis_starts(width, tile_w, stride),
            ys: axis_starts(height, tile_h, stride),
        })
    }

    /// Origins in row-major layout order.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        self.ys
            .iter()
            .flat_map(|&y| self.xs.iter().map(move |&x| (x, y)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_single(&self) -> bool {
        self.len() == 1 && self.tile_w == self.width && self.tile_h == self.height
    }
}

/// Radial weights `max(eps, cos^2(pi/2 * min(r/R, 1)))` over a tile, with `r`
/// measured between pixel indices and the centre `((w-1)/2, (h-1)/2)` and `R`
/// half the diagonal, so corner pixels sit exactly at `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

pub fn make_blend_mask(width: usize, height: usize, eps_blend: f64) -> BlendMask {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let radius = (cx * cx + cy * cy).sqrt();
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let t = if radius > 0.0 { (r / radius).min(1.0) } else { 0.0 };
            let c = (0.5 * PI * t).cos();
            data.push((c * c).max(eps_blend) as f32);
        }
    }
    BlendMask { width, height, data }
}

/// Produces per-pixel probabilities for one tile.
pub trait TilePredictor {
    /// Whole-image normalization applied once before tiling.
    fn prepare(&self, image: &ImagePlane) -> Result<ImagePlane> {
        Ok(image.clone())
    }

    fn predict_tile(&self, tile: &ImagePlane) -> Result<ProbabilityMap>;
}

/// The trained head on a backbone, optionally with a pixel budget that
/// emulates running out of device memory.
pub struct ModelPredictor<'a> {
    pub backbone: &'a Backbone,
    pub model: &'a SegmentationModel,
    pub max_tile_pixels: Option<usize>,
}

impl TilePredictor for ModelPredictor<'_> {
    fn prepare(&self, image: &ImagePlane) -> Result<ImagePlane> {
        self.backbone.prepare(image)
    }

    fn predict_tile(&self, tile: &ImagePlane) -> Result<ProbabilityMap> {
        let pixels = tile.width() * tile.height();
        if let Some(budget) = self.max_tile_pixels {
            if pixels > budget {
                return Err(Error::ResourceExhausted { pixels, budget });
            }
        }
        self.model.predict_prepared(self.backbone, tile)
    }
}

fn check_tile(p: &ProbabilityMap, w: usize, h: usize) -> Result<()> {
    if p.width != w || p.height != h {
        return Err(Error::Contract(format!(
            "predictor returned {}x{} for a {w}x{h} tile",
            p.width, p.height
        )));
    }
    Ok(())
}

/// Predicts a window; on resource exhaustion splits it into quadrants and
/// tries each once more.
fn predict_window<P: TilePredictor + ?Sized>(
    predictor: &P,
    image: &ImagePlane,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
) -> Result<ProbabilityMap> {
    let tile = image.crop(x0, y0, w, h)?;
    match predictor.predict_tile(&tile) {
        Ok(p) => {
            check_tile(&p, w, h)?;
            Ok(p)
        }
        Err(Error::ResourceExhausted { .. }) if w >= 2 && h >= 2 => {
            let (w0, h0) = (w / 2, h / 2);
            let mut out: Option<ProbabilityMap> = None;
            for (qx, qw) in [(0, w0), (w0, w - w0)] {
                for (qy, qh) in [(0, h0), (h0, h - h0)] {
                    let part = predictor.predict_tile(&image.crop(x0 + qx, y0 + qy, qw, qh)?)?;
                    check_tile(&part, qw, qh)?;
                    let k = part.num_classes;
                    let dst = out.get_or_insert_with(|| ProbabilityMap {
                        height: h,
                        width: w,
                        num_classes: k,
                        data: vec![0.0; w * h * k],
                        spacing_um: part.spacing_um,
                    });
                    if dst.num_classes != k {
                        return Err(Error::Contract("quadrants disagree on class count".into()));
                    }
                    for y in 0..qh {
                        let s = y * qw * k;
                        let d = ((qy + y) * w + qx) * k;
                        dst.data[d..d + qw * k].copy_from_slice(&part.data[s..s + qw * k]);
                    }
                }
            }
            Ok(out.expect("four quadrants"))
        }
        Err(e) => Err(e),
    }
}

/// Blended tiled inference. A layout with one tile spanning the image
/// returns the predictor's output unchanged.
pub fn tiled_inference<P: TilePredictor + ?Sized>(
    image: &ImagePlane,
    predictor: &P,
    layout: &TileLayout,
    eps_blend: f64,
) -> Result<ProbabilityMap> {
    check_layout(image, layout)?;
    let prepared = predictor.prepare(image)?;
    if layout.is_single() {
        let mut p = predict_window(predictor, &prepared, 0, 0, layout.width, layout.height)?;
        p.spacing_um = image.spacing_um;
        return Ok(p);
    }
    let blend = make_blend_mask(layout.tile_w, layout.tile_h, eps_blend);
    let (w, h) = (layout.width, layout.height);
    let mut acc: Vec<f64> = Vec::new();
    let mut wsum = vec![0.0f64; w * h];
    let mut k = 0;
    for (x0, y0) in layout.origins() {
        let p = predict_window(predictor, &prepared, x0, y0, layout.tile_w, layout.tile_h)?;
        if acc.is_empty() {
            k = p.num_classes;
            acc = vec![0.0; w * h * k];
        } else if p.num_classes != k {
            return Err(Error::Contract("tiles disagree on class count".into()));
        }
        for ty in 0..layout.tile_h {
            for tx in 0..layout.tile_w {
                let bw = blend.data[ty * layout.tile_w + tx] as f64;
                let g = (y0 + ty) * w + x0 + tx;
                wsum[g] += bw;
                let src = &p.data[(ty * layout.tile_w + tx) * k..][..k];
                for (a, &v) in acc[g * k..(g + 1) * k].iter_mut().zip(src) {
                    *a += bw * v as f64;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(w * h * k);
    for (g, &s) in wsum.iter().enumerate() {
        assert!(s > 0.0, "pixel {g} is not covered by any tile");
        data.extend(acc[g * k..(g + 1) * k].iter().map(|&a| (a / s) as f32));
    }
    let mut map = ProbabilityMap::new(h, w, k, data, image.spacing_um)?;
    map.renormalize();
    Ok(map)
}

/// Stitching without blending: every pixel takes the value of the last tile
/// in layout order that covers it. Kept as the reference for seam tests.
pub fn stitch_unblended<P: TilePredictor + ?Sized>(
    image: &ImagePlane,
    predictor: &P,
    layout: &TileLayout,
) -> Result<ProbabilityMap> {
    check_layout(image, layout)?;
    let prepared = predictor.prepare(image)?;
    let (w, h) = (layout.width, layout.height);
    let mut out: Option<ProbabilityMap> = None;
    for (x0, y0) in layout.origins() {
        let p = predict_window(predictor, &prepared, x0, y0, layout.tile_w, layout.tile_h)?;
        let k = p.num_classes;
        let dst = out.get_or_insert_with(|| ProbabilityMap {
            height: h,
            width: w,
            num_classes: k,
            data: vec![0.0; w * h * k],
            spacing_um: image.spacing_um,
        });
        for ty in 0..layout.tile_h {
            let d = ((y0 + ty) * w + x0) * k;
            let s = ty * layout.tile_w * k;
            dst.data[d..d + layout.tile_w * k].copy_from_slice(&p.data[s..s + layout.tile_w * k]);
        }
    }
    Ok(out.expect("layout has tiles"))
}

fn check_layout(image: &ImagePlane, layout: &TileLayout) -> Result<()> {
    if image.width() != layout.width || image.height() != layout.height {
        return Err(Error::Contract(format!(
            "layout is for {}x{}, image is {}x{}",
            layout.width,
            layout.height,
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Per-channel Chambolle TV denoising followed by clamping to `[0, 1]` and
/// per-pixel renormalization. Weight 0 returns the map unchanged.
pub fn tv_smooth(prob: &ProbabilityMap, weight: f64, max_iter: usize, eps: f64) -> ProbabilityMap {
    if weight == 0.0 {
        return prob.clone();
    }
    let mut out = prob.clone();
    for c in 0..prob.num_classes {
        let channel: Vec<f64> = prob.channel(c).iter().map(|&v| v as f64).collect();
        let smooth = denoise_tv_chambolle(&channel, prob.height, prob.width, weight, eps, max_iter);
        let values: Vec<f32> = smooth.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
        out.set_channel(c, &values);
    }
    out.renormalize();
    out
}

/// Tiled inference followed by TV smoothing, using `cfg` throughout.
pub fn segment(image: &ImagePlane, backbone: &Backbone, model: &SegmentationModel, cfg: &TileConfig) -> Result<ProbabilityMap> {
    cfg.validate()?;
    let layout = TileLayout::new(image.width(), image.height(), cfg.tile_size, cfg.overlap)?;
    let predictor = ModelPredictor {
        backbone,
        model,
        max_tile_pixels: cfg.max_tile_pixels,
    };
    let prob = tiled_inference(image, &predictor, &layout, cfg.eps_blend)?;
    Ok(tv_smooth(&prob, cfg.tv_weight, cfg.tv_max_iter, cfg.tv_eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(Vec<f32>);
    impl TilePredictor for Constant {
        fn predict_tile(&self, tile: &ImagePlane) -> Result<ProbabilityMap> {
            let n = tile.width() * tile.height();
            ProbabilityMap::new(tile.height(), tile.width(), self.0.len(), self.0.repeat(n), 1.0)
        }
    }

    /// Fails above a pixel budget; otherwise class 0 probability encodes x.
    struct Budgeted(usize);
    impl TilePredictor for Budgeted {
        fn predict_tile(&self, tile: &ImagePlane) -> Result<ProbabilityMap> {
            let n = tile.width() * tile.height();
            if n > self.0 {
                return Err(Error::ResourceExhausted { pixels: n, budget: self.0 });
            }
            let mut data = Vec::new();
            for _ in 0..tile.height() {
                for x in 0..tile.width() {
                    let v = tile.get(x, 0, 0);
                    data.extend([v, 1.0 - v]);
                }
            }
            ProbabilityMap::new(tile.height(), tile.width(), 2, data, 1.0)
        }
    }

    #[test]
    fn layout_formula() {
        let l = TileLayout::new(2048, 2048, 512, 0.25).unwrap();
        assert_eq!(l.stride, 384);
        assert_eq!(l.xs, vec![0, 384, 768, 1152, 1536]);
        let l = TileLayout::new(1000, 300, 512, 0.5).unwrap();
        assert_eq!(l.xs, vec![0, 256, 488]);
        assert_eq!((l.ys.clone(), l.tile_h), (vec![0], 300));
        assert!(TileLayout::new(512, 512, 512, 0.5).unwrap().is_single());
        assert!(TileLayout::new(10, 10, 512, 1.0).is_err());
    }

    #[test]
    fn blend_mask_centre_and_corner() {
        let m = make_blend_mask(65, 65, 0.01);
        assert_eq!(m.data[32 * 65 + 32], 1.0);
        assert_eq!(m.data[0], 0.01);
        assert_eq!(m.data[65 * 65 - 1], 0.01);
        let even = make_blend_mask(64, 64, 0.01);
        assert_eq!(even.data[0], 0.01);
        // nearest pixel centre is sqrt(0.5) px from the centre: cos^2(pi/2 * 0.0159) = 0.99938
        assert!((even.data[31 * 64 + 31] - 0.99938).abs() < 1e-5);
    }

    #[test]
    fn constant_model_gives_constant_output() {
        let c = vec![0.2f32, 0.3, 0.5];
        let img = ImagePlane::filled(300, 200, 1, 0.0).unwrap();
        let l = TileLayout::new(300, 200, 128, 0.5).unwrap();
        let out = tiled_inference(&img, &Constant(c.clone()), &l, 0.01).unwrap();
        for px in out.data.chunks_exact(3) {
            for (a, b) in px.iter().zip(&c) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn oversized_tiles_are_split_once() {
        let img = ImagePlane::from_gray(64, 64, (0..64 * 64).map(|i| (i % 64) as f32 / 64.0).collect()).unwrap();
        let l = TileLayout::new(64, 64, 64, 0.5).unwrap();
        let out = tiled_inference(&img, &Budgeted(32 * 32), &l, 0.01).unwrap();
        assert!((out.pixel(40, 3)[0] - 40.0 / 64.0).abs() < 1e-6);
        let err = tiled_inference(&img, &Budgeted(100), &l, 0.01).unwrap_err();
        assert!(matches!(err, Error::ResourceExhausted { .. }));
    }

    #[test]
    fn tv_weight_zero_is_identity() {
        let p = ProbabilityMap::new(2, 2, 2, vec![0.1, 0.9, 0.6, 0.4, 0.3, 0.7, 0.5, 0.5], 1.0).unwrap();
        assert_eq!(tv_smooth(&p, 0.0, 50, 2e-4), p);
        let s = tv_smooth(&p, 0.2, 50, 2e-4);
        assert!(s.max_sum_error() < 1e-5);
    }
}
