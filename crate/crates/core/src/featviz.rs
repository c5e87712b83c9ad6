//! Principal-component views of patch tokens as RGB images.
//!
//! The basis is fitted per token grid. Each of the top three components
//! becomes one colour channel after a 2nd to 98th percentile stretch.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::backbone::{Backbone, TokenGrid};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::stats::percentile_sorted;

/// Top-3 principal axes of a token set.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaFit {
    pub mean: Vec<f64>,
    /// Three unit-length directions of length `dim`.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: [f64; 3],
    /// `n x 3` projections of the centred tokens.
    pub scores: Vec<[f64; 3]>,
    /// No variance at all; every score is zero.
    pub degenerate: bool,
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbRaster {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::Contract("raster buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode_png()?)
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upsample(&self, factor: usize) -> Self {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&self.pixel(x / factor, y / factor));
            }
        }
        Self { width: w, height: h, data }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let s = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[s..s + w * 3]);
        }
        Self { width: w, height: h, data }
    }
}

/// Mean-centred PCA. Uses the `dim x dim` covariance or, when there are
/// fewer tokens than dimensions, the `n x n` Gram matrix. Each direction is
/// signed so that its largest-magnitude loading is positive.
pub fn pca_fit(grid: &TokenGrid) -> Result<PcaFit> {
    let (n, d) = (grid.rows * grid.cols, grid.dim);
    if n < 3 || d < 3 {
        return Err(Error::Input(format!(
            "PCA to RGB needs at least 3 tokens of at least 3 dimensions, got {n} x {d}"
        )));
    }
    let mut mean = vec![0.0f64; d];
    for t in grid.data.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(t) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x: Vec<f64> = grid
        .data
        .chunks_exact(d)
        .flat_map(|t| t.iter().zip(&mean).map(|(&v, m)| v as f64 - m))
        .collect();
    let total: f64 = x.iter().map(|v| v * v).sum();
    let scale: f64 = mean.iter().map(|m| m * m).sum::<f64>().max(1.0) * n as f64;
    if total <= 1e-24 * scale {
        return Ok(PcaFit {
            mean,
            components: vec![vec![0.0; d]; 3],
            eigenvalues: [0.0; 3],
            scores: vec![[0.0; 3]; n],
            degenerate: true,
        });
    }

    let use_gram = n < d;
    let m = if use_gram { n } else { d };
    let mut sym = vec![0.0f64; m * m];
    // covariance: X^T X (d x d); Gram: X X^T (n x n)
    unsafe {
        if use_gram {
            matrixmultiply::dgemm(n, d, n, 1.0, x.as_ptr(), d as isize, 1, x.as_ptr(), 1, d as isize, 0.0, sym.as_mut_ptr(), n as isize, 1);
        } else {
            matrixmultiply::dgemm(d, n, d, 1.0, x.as_ptr(), 1, d as isize, x.as_ptr(), d as isize, 1, 0.0, sym.as_mut_ptr(), d as isize, 1);
        }
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(m, m, &sym));
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(3);
    let mut eigenvalues = [0.0; 3];
    for (slot, &j) in order.iter().take(3).enumerate() {
        let lambda = eig.eigenvalues[j].max(0.0);
        let mut dir: Vec<f64> = if use_gram {
            let u = eig.eigenvectors.column(j);
            let mut v = vec![0.0; d];
            for (i, row) in x.chunks_exact(d).enumerate() {
                for (vk, &xk) in v.iter_mut().zip(row) {
                    *vk += u[i] * xk;
                }
            }
            v
        } else {
            eig.eigenvectors.column(j).iter().copied().collect()
        };
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && lambda > 1e-12 * eig.eigenvalues[order[0]] {
            dir.iter_mut().for_each(|v| *v /= norm);
        } else {
            dir.iter_mut().for_each(|v| *v = 0.0);
        }
        let lead = dir
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if lead < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        eigenvalues[slot] = lambda / (n as f64 - 1.0).max(1.0);
        components.push(dir);
    }
    while components.len() < 3 {
        components.push(vec![0.0; d]);
    }
    let scores = x
        .chunks_exact(d)
        .map(|row| {
            let mut s = [0.0; 3];
            for (sc, c) in s.iter_mut().zip(&components) {
                *sc = row.iter().zip(c).map(|(a, b)| a * b).sum();
            }
            s
        })
        .collect();
    Ok(PcaFit {
        mean,
        components,
        eigenvalues,
        scores,
        degenerate: false,
    })
}

/// Token-resolution RGB map plus whether the input had no variance (then
/// every pixel is (128, 128, 128)).
pub fn pca_rgb(grid: &TokenGrid) -> Result<(RgbRaster, bool)> {
    let fit = pca_fit(grid)?;
    let n = fit.scores.len();
    let mut data = vec![128u8; n * 3];
    if !fit.degenerate {
        for c in 0..3 {
            let mut vals: Vec<f64> = fit.scores.iter().map(|s| s[c]).collect();
            vals.sort_by(f64::total_cmp);
            let (lo, hi) = (percentile_sorted(&vals, 2.0), percentile_sorted(&vals, 98.0));
            for (i, s) in fit.scores.iter().enumerate() {
                data[i * 3 + c] = if hi > lo {
                    ((s[c] - lo) / (hi - lo) * 255.0).clamp(0.0, 255.0).round() as u8
                } else {
                    128
                };
            }
        }
    }
    Ok((
        RgbRaster {
            width: grid.cols,
            height: grid.rows,
            data,
        },
        fit.degenerate,
    ))
}

/// Encodes `image`, maps tap layer `layer` to RGB and, if asked, enlarges it
/// to the image's pixel grid (nearest neighbour, padding cropped away).
pub fn pca_rgb_image(backbone: &Backbone, image: &ImagePlane, layer: usize, upsample: bool) -> Result<(RgbRaster, bool)> {
    if !backbone.spec().tap_layers.contains(&layer) {
        return Err(Error::Input(format!(
            "layer {layer} is not a tap layer; available: {:?}",
            backbone.spec().tap_layers
        )));
    }
    let pyramid = backbone.encode(image)?;
    let grid = pyramid.level(layer).expect("tap layer is encoded");
    let (rgb, degenerate) = pca_rgb(grid)?;
    if !upsample {
        return Ok((rgb, degenerate));
    }
    let pad = pyramid.pad;
    let big = rgb.upsample(pyramid.patch_size);
    Ok((big.crop(pad.left, pad.top, pad.source_w, pad.source_h), degenerate))
}

/// Side-by-side `image | map` for reports; the map is enlarged to the
/// image height by nearest neighbour if needed.
pub fn montage(image: &ImagePlane, map: &RgbRaster) -> Result<RgbRaster> {
    let (w, h) = (image.width(), image.height());
    let map = if map.height != h && map.height > 0 && h % map.height == 0 {
        map.upsample(h / map.height)
    } else {
        map.clone()
    };
    if map.height != h {
        return Err(Error::Input(format!("map height {} does not match image height {h}", map.height)));
    }
    let gray = image.to_channels(1)?;
    let mut plane = gray.clone();
    crate::backbone::normalize_percentile(&mut plane, 1.0, 99.0);
    let out_w = w + map.width;
    let mut data = Vec::with_capacity(out_w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let v = (plane.get(x, y, 0) * 255.0).round().clamp(0.0, 255.0) as u8;
            data.extend([v, v, v]);
        }
        data.extend_from_slice(&map.data[y * map.width * 3..(y + 1) * map.width * 3]);
    }
    Ok(RgbRaster {
        width: out_w,
        height: h,
        data,
    })
}
