//! Frozen patch-token feature extraction.
//!
//! A [`FeatureProvider`] turns a normalized, padded image into one token grid
//! per requested transformer depth. Providers are looked up by id in a
//! [`ProviderRegistry`]; the built-in `synthetic` provider computes local
//! texture statistics so the rest of the pipeline runs without pretrained
//! weights.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::stats::percentile_f32;

pub const SYNTHETIC_PROVIDER: &str = "synthetic";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    /// Pixels per token edge.
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    /// 1-based block indices whose patch tokens are extracted, ascending.
    pub tap_layers: Vec<usize>,
    pub provider_id: String,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            patch_size: 16,
            hidden_dim: 768,
            num_blocks: 12,
            tap_layers: vec![3, 6, 9, 12],
            provider_id: SYNTHETIC_PROVIDER.to_string(),
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.hidden_dim == 0 || self.num_blocks == 0 {
            return Err(Error::Config(
                "patch_size, hidden_dim and num_blocks must be positive".into(),
            ));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::Config("tap_layers is empty".into()));
        }
        for w in self.tap_layers.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(format!(
                    "tap_layers must be strictly increasing: {:?}",
                    self.tap_layers
                )));
            }
        }
        if let Some(&bad) = self
            .tap_layers
            .iter()
            .find(|&&l| l == 0 || l > self.num_blocks)
        {
            return Err(Error::Config(format!(
                "tap layer {bad} outside 1..={}",
                self.num_blocks
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding; checkpoints record it.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Symmetric padding that brings an `h x w` image to a multiple of the patch
/// size. The extra row/column of an odd pad goes to the bottom/right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadPlan {
    pub source_h: usize,
    pub source_w: usize,
    pub top: usize,
    pub left: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl PadPlan {
    pub fn new(h: usize, w: usize, patch: usize) -> Self {
        let padded_h = h.div_ceil(patch) * patch;
        let padded_w = w.div_ceil(patch) * patch;
        Self {
            source_h: h,
            source_w: w,
            top: (padded_h - h) / 2,
            left: (padded_w - w) / 2,
            padded_h,
            padded_w,
        }
    }

    pub fn rows(&self, cell: usize) -> usize {
        self.padded_h / cell
    }

    pub fn cols(&self, cell: usize) -> usize {
        self.padded_w / cell
    }

    /// Reflect-pads (mirror without edge repetition) according to the plan.
    pub fn apply(&self, image: &ImagePlane) -> Result<ImagePlane> {
        if self.padded_h == self.source_h && self.padded_w == self.source_w {
            return Ok(image.clone());
        }
        let c = image.channels();
        let mut data = Vec::with_capacity(self.padded_h * self.padded_w * c);
        for py in 0..self.padded_h {
            let sy = reflect(py as isize - self.top as isize, self.source_h);
            for px in 0..self.padded_w {
                let sx = reflect(px as isize - self.left as isize, self.source_w);
                for ch in 0..c {
                    data.push(image.get(sx, sy, ch));
                }
            }
        }
        ImagePlane::new(self.padded_w, self.padded_h, c, data, image.spacing_um)
    }
}

#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// `rows x cols x dim` patch tokens, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl TokenGrid {
    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        Self {
            rows,
            cols,
            dim,
            data: vec![0.0; rows * cols * dim],
        }
    }

    pub fn token(&self, r: usize, c: usize) -> &[f32] {
        let i = (r * self.cols + c) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn token_mut(&mut self, r: usize, c: usize) -> &mut [f32] {
        let i = (r * self.cols + c) * self.dim;
        &mut self.data[i..i + self.dim]
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    /// 1-based transformer block this level was tapped from.
    pub layer: usize,
    pub tokens: TokenGrid,
}

/// Patch tokens from several depths of one image, all on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureLevel>,
    pub pad: PadPlan,
    pub patch_size: usize,
}

impl FeaturePyramid {
    pub fn rows(&self) -> usize {
        self.levels[0].tokens.rows
    }

    pub fn cols(&self) -> usize {
        self.levels[0].tokens.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.levels[0].tokens.dim
    }

    /// Unpadded `(height, width)` of the encoded image.
    pub fn source_shape(&self) -> (usize, usize) {
        (self.pad.source_h, self.pad.source_w)
    }

    pub fn level(&self, layer: usize) -> Option<&TokenGrid> {
        self.levels
            .iter()
            .find(|l| l.layer == layer)
            .map(|l| &l.tokens)
    }
}

/// A frozen encoder. Implementations must be deterministic and must not
/// mutate internal state in `extract`.
pub trait FeatureProvider: Send + Sync {
    fn id(&self) -> &str;
    fn patch_size(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn num_blocks(&self) -> usize;
    /// Channel count the provider consumes (1 or 3).
    fn in_channels(&self) -> usize;

    /// Patch tokens for each tap layer. `image` is normalized to `[0, 1]`,
    /// has [`Self::in_channels`] channels and dimensions that are multiples
    /// of the patch size. Class/register tokens must not be returned.
    fn extract(&self, image: &ImagePlane, tap_layers: &[usize]) -> Result<Vec<TokenGrid>>;

    /// Digest of every weight the provider holds.
    fn parameter_digest(&self) -> String;
}

/// Number of local statistics the synthetic provider computes per patch.
pub const SYNTHETIC_STATS: usize = 8;

/// Texture-statistics stand-in for a pretrained encoder.
///
/// Every patch gets [`SYNTHETIC_STATS`] gain-scaled statistics (mean,
/// standard deviation, four oriented gradient energies, mean absolute
/// deviation, range). A token at a given block holds the patch's own
/// statistics followed by their average over a square neighbourhood of
/// patches, and that pair is repeated to fill `hidden_dim`. The neighbourhood
/// radius grows with depth, so deeper blocks see more context while keeping
/// the local signal, as the receptive field of a real encoder does.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    patch_size: usize,
    hidden_dim: usize,
    num_blocks: usize,
}

impl SyntheticProvider {
    pub fn new(spec: &BackboneSpec) -> Self {
        Self {
            patch_size: spec.patch_size,
            hidden_dim: spec.hidden_dim,
            num_blocks: spec.num_blocks,
        }
    }

    /// Neighbourhood radius, in patches, of the context half of `layer`'s
    /// tokens: 0 in the first quarter of the blocks, up to 3 in the last.
    pub fn context_radius(&self, layer: usize) -> usize {
        ((layer.saturating_sub(1) * 4) / self.num_blocks.max(1)).min(3)
    }

    /// Raw statistics of a square `side x side` block (row-major).
    pub fn patch_statistics(block: &[f32], side: usize) -> [f32; SYNTHETIC_STATS] {
        let n = (side * side) as f32;
        let mean = block.iter().sum::<f32>() / n;
        let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let mad = block.iter().map(|v| (v - mean).abs()).sum::<f32>() / n;
        let (lo, hi) = block
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let at = |x: usize, y: usize| block[y * side + x];
        let mut gx = 0.0f32;
        let mut gy = 0.0f32;
        let mut gd = 0.0f32;
        let mut ga = 0.0f32;
        if side > 1 {
            for y in 0..side {
                for x in 0..side - 1 {
                    gx += (at(x + 1, y) - at(x, y)).abs();
                    gy += (at(y, x + 1) - at(y, x)).abs();
                }
            }
            for y in 0..side - 1 {
                for x in 0..side - 1 {
                    gd += (at(x + 1, y + 1) - at(x, y)).abs();
                    ga += (at(x, y + 1) - at(x + 1, y)).abs();
                }
            }
            let straight = (side * (side - 1)) as f32;
            let diag = ((side - 1) * (side - 1)) as f32;
            gx /= straight;
            gy /= straight;
            gd /= diag;
            ga /= diag;
        }
        [mean, var.sqrt(), gx, gy, gd, ga, mad, hi - lo]
    }

    /// Token of a patch whose neighbours all look like it, which is what
    /// any block sees inside a uniform texture region.
    pub fn isolated_token(&self, patch: &[f32]) -> Vec<f32> {
        debug_assert_eq!(patch.len(), self.patch_size * self.patch_size);
        let local = scale_stats(&Self::patch_statistics(patch, self.patch_size));
        let mut token = vec![0.0f32; self.hidden_dim];
        fill_token(&local, &local, &mut token);
        token
    }
}

/// Box mean with reflected borders over a `rows x cols` grid of stats.
fn box_mean(stats: &[[f32; SYNTHETIC_STATS]], rows: usize, cols: usize, radius: usize) -> Vec<[f32; SYNTHETIC_STATS]> {
    if radius == 0 {
        return stats.to_vec();
    }
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f32;
    let mut horiz = vec![[0.0f32; SYNTHETIC_STATS]; rows * cols];
    for y in 0..rows {
        for x in 0..cols {
            let acc = &mut horiz[y * cols + x];
            for d in -r..=r {
                let src = &stats[y * cols + reflect(x as isize + d, cols)];
                for i in 0..SYNTHETIC_STATS {
                    acc[i] += src[i] * norm;
                }
            }
        }
    }
    let mut out = vec![[0.0f32; SYNTHETIC_STATS]; rows * cols];
    for y in 0..rows {
        for x in 0..cols {
            let acc = &mut out[y * cols + x];
            for d in -r..=r {
                let src = &horiz[reflect(y as isize + d, rows) * cols + x];
                for i in 0..SYNTHETIC_STATS {
                    acc[i] += src[i] * norm;
                }
            }
        }
    }
    out
}

fn scale_stats(stats: &[f32; SYNTHETIC_STATS]) -> [f32; SYNTHETIC_STATS] {
    // bring every statistic to O(1) for intensities in [0, 1]
    const GAIN: [f32; SYNTHETIC_STATS] = [2.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 2.0];
    let mut scaled = [0.0f32; SYNTHETIC_STATS];
    for i in 0..SYNTHETIC_STATS {
        scaled[i] = stats[i] * GAIN[i];
    }
    scaled[0] -= 1.0;
    scaled
}

fn fill_token(local: &[f32; SYNTHETIC_STATS], context: &[f32; SYNTHETIC_STATS], token: &mut [f32]) {
    for (i, t) in token.iter_mut().enumerate() {
        let j = i % (2 * SYNTHETIC_STATS);
        *t = if j < SYNTHETIC_STATS { local[j] } else { context[j - SYNTHETIC_STATS] };
    }
}

impl FeatureProvider for SyntheticProvider {
    fn id(&self) -> &str {
        SYNTHETIC_PROVIDER
    }

    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    fn in_channels(&self) -> usize {
        1
    }

    fn extract(&self, image: &ImagePlane, tap_layers: &[usize]) -> Result<Vec<TokenGrid>> {
        let p = self.patch_size;
        if image.channels() != 1 || !image.width().is_multiple_of(p) || !image.height().is_multiple_of(p) {
            return Err(Error::Contract(format!(
                "synthetic provider needs a 1-channel image with sides divisible by {p}"
            )));
        }
        let rows = image.height() / p;
        let cols = image.width() / p;
        let mut patch = vec![0.0f32; p * p];
        let data = image.data();
        let w = image.width();
        let mut local = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                for y in 0..p {
                    let src = (r * p + y) * w + c * p;
                    patch[y * p..(y + 1) * p].copy_from_slice(&data[src..src + p]);
                }
                local.push(scale_stats(&Self::patch_statistics(&patch, p)));
            }
        }
        let mut grids = Vec::with_capacity(tap_layers.len());
        for &layer in tap_layers {
            let context = box_mean(&local, rows, cols, self.context_radius(layer));
            let mut grid = TokenGrid::zeros(rows, cols, self.hidden_dim);
            for (i, t) in grid.data.chunks_mut(self.hidden_dim).enumerate() {
                fill_token(&local[i], &context[i], t);
            }
            grids.push(grid);
        }
        Ok(grids)
    }

    fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"synthetic-texture-stats/v2");
        for v in [self.patch_size, self.hidden_dim, self.num_blocks] {
            h.update((v as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Constructs a provider for a spec, optionally from a weight file.
pub type ProviderFactory =
    Box<dyn Fn(&BackboneSpec, Option<&Path>) -> Result<Arc<dyn FeatureProvider>> + Send + Sync>;

/// String-keyed provider constructors.
pub struct ProviderRegistry {
    factories: BTreeMap<String, ProviderFactory>,
}

impl Default for ProviderRegistry {
    fn default() -> Self {
        let mut reg = Self {
            factories: BTreeMap::new(),
        };
        reg.register(
            SYNTHETIC_PROVIDER,
            Box::new(|spec, _weights| Ok(Arc::new(SyntheticProvider::new(spec)) as Arc<_>)),
        );
        reg
    }
}

impl ProviderRegistry {
    pub fn register(&mut self, id: &str, factory: ProviderFactory) {
        self.factories.insert(id.to_string(), factory);
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, spec: &BackboneSpec, weights: Option<&Path>) -> Result<Backbone> {
        spec.validate()?;
        let factory = self.factories.get(&spec.provider_id).ok_or_else(|| {
            Error::Config(format!(
                "unknown backbone provider {:?} (registered: {})",
                spec.provider_id,
                self.ids().collect::<Vec<_>>().join(", ")
            ))
        })?;
        let provider = factory(spec, weights)?;
        Backbone::new(spec.clone(), provider)
    }
}

/// Configuration for building a backbone outside the registry defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    #[serde(default)]
    pub spec: BackboneSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

/// A provider bound to a validated spec, plus preprocessing.
#[derive(Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    provider: Arc<dyn FeatureProvider>,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone")
            .field("spec", &self.spec)
            .field("provider", &self.provider.id())
            .finish()
    }
}

impl Backbone {
    pub fn new(spec: BackboneSpec, provider: Arc<dyn FeatureProvider>) -> Result<Self> {
        spec.validate()?;
        if provider.hidden_dim() != spec.hidden_dim
            || provider.patch_size() != spec.patch_size
            || provider.num_blocks() != spec.num_blocks
        {
            return Err(Error::Config(format!(
                "provider {:?} reports patch {} / dim {} / {} blocks, spec says {} / {} / {}",
                provider.id(),
                provider.patch_size(),
                provider.hidden_dim(),
                provider.num_blocks(),
                spec.patch_size,
                spec.hidden_dim,
                spec.num_blocks
            )));
        }
        Ok(Self { spec, provider })
    }

    /// Synthetic provider with the given spec.
    pub fn synthetic(spec: BackboneSpec) -> Result<Self> {
        ProviderRegistry::default().build(
            &BackboneSpec {
                provider_id: SYNTHETIC_PROVIDER.into(),
                ..spec
            },
            None,
        )
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn provider(&self) -> &dyn FeatureProvider {
        self.provider.as_ref()
    }

    pub fn parameter_digest(&self) -> String {
        self.provider.parameter_digest()
    }

    /// Percentile (1st to 99th) intensity rescale to `[0, 1]` and conversion to
    /// the provider's channel count.
    pub fn prepare(&self, image: &ImagePlane) -> Result<ImagePlane> {
        let mut img = image.to_channels(self.provider.in_channels())?;
        normalize_percentile(&mut img, 1.0, 99.0);
        Ok(img)
    }

    pub fn encode(&self, image: &ImagePlane) -> Result<FeaturePyramid> {
        self.encode_prepared(&self.prepare(image)?)
    }

    /// Encodes an image that already went through [`Self::prepare`].
    pub fn encode_prepared(&self, image: &ImagePlane) -> Result<FeaturePyramid> {
        let p = self.spec.patch_size;
        if image.width() < p || image.height() < p {
            return Err(Error::Input(format!(
                "image {}x{} is smaller than one {p}x{p} patch",
                image.width(),
                image.height()
            )));
        }
        let pad = PadPlan::new(image.height(), image.width(), p);
        let padded = pad.apply(image)?;
        let grids = self.provider.extract(&padded, &self.spec.tap_layers)?;
        let (rows, cols) = (pad.rows(p), pad.cols(p));
        if grids.len() != self.spec.tap_layers.len() {
            return Err(Error::Contract(format!(
                "provider returned {} levels for {} tap layers",
                grids.len(),
                self.spec.tap_layers.len()
            )));
        }
        for g in &grids {
            if g.rows != rows || g.cols != cols || g.dim != self.spec.hidden_dim {
                return Err(Error::Contract(format!(
                    "provider returned a {}x{}x{} grid, expected {rows}x{cols}x{}",
                    g.rows, g.cols, g.dim, self.spec.hidden_dim
                )));
            }
        }
        let levels = self
            .spec
            .tap_layers
            .iter()
            .zip(grids)
            .map(|(&layer, tokens)| FeatureLevel { layer, tokens })
            .collect();
        Ok(FeaturePyramid {
            levels,
            pad,
            patch_size: p,
        })
    }
}

/// Rescales all samples so the `lo`/`hi` percentiles map to 0 and 1,
/// clamping outside. A flat image becomes all zeros.
pub fn normalize_percentile(image: &mut ImagePlane, lo: f64, hi: f64) {
    let mut scratch = image.data().to_vec();
    let p_lo = percentile_f32(&mut scratch, lo);
    let p_hi = percentile_f32(&mut scratch, hi);
    let span = p_hi - p_lo;
    for v in image.data_mut() {
        *v = if span > 0.0 {
            ((*v - p_lo) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BackboneSpec {
        BackboneSpec::default()
    }

    #[test]
    fn spec_validation() {
        assert!(spec().validate().is_ok());
        let mut s = spec();
        s.tap_layers = vec![3, 3];
        assert!(s.validate().is_err());
        s.tap_layers = vec![0, 4];
        assert!(s.validate().is_err());
        s.tap_layers = vec![6, 13];
        assert!(s.validate().is_err());
        s.tap_layers = vec![9, 6];
        assert!(s.validate().is_err());
    }

    #[test]
    fn unknown_provider_is_config_error() {
        let s = BackboneSpec {
            provider_id: "dinov3-vitb16".into(),
            ..spec()
        };
        let err = ProviderRegistry::default().build(&s, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-1, 1), 0);
    }

    #[test]
    fn pad_plan_is_symmetric() {
        let p = PadPlan::new(500, 497, 16);
        assert_eq!((p.padded_h, p.padded_w), (512, 512));
        assert_eq!((p.top, p.left), (6, 7));
        assert_eq!(PadPlan::new(512, 512, 16).top, 0);
    }

    #[test]
    fn encode_512_gives_four_32x32_levels() {
        let bb = Backbone::synthetic(spec()).unwrap();
        let img = ImagePlane::from_gray(
            512,
            512,
            (0..512 * 512).map(|i| ((i * 7919) % 251) as f32).collect(),
        )
        .unwrap();
        let fp = bb.encode(&img).unwrap();
        assert_eq!(fp.levels.len(), 4);
        for l in &fp.levels {
            assert_eq!((l.tokens.rows, l.tokens.cols, l.tokens.dim), (32, 32, 768));
            assert_eq!(l.tokens.data.len(), 32 * 32 * 768);
        }
        assert_eq!(
            fp.levels.iter().map(|l| l.layer).collect::<Vec<_>>(),
            vec![3, 6, 9, 12]
        );
    }

    #[test]
    fn encode_500_pads_to_512() {
        let bb = Backbone::synthetic(spec()).unwrap();
        let img = ImagePlane::from_gray(500, 500, vec![1.0; 500 * 500]).unwrap();
        let fp = bb.encode(&img).unwrap();
        assert_eq!((fp.rows(), fp.cols()), (32, 32));
        assert_eq!(fp.source_shape(), (500, 500));
    }

    #[test]
    fn zero_image_gives_constant_levels() {
        let bb = Backbone::synthetic(spec()).unwrap();
        let img = ImagePlane::from_gray(64, 48, vec![0.0; 64 * 48]).unwrap();
        let fp = bb.encode(&img).unwrap();
        for l in &fp.levels {
            let first = l.tokens.token(0, 0).to_vec();
            for r in 0..l.tokens.rows {
                for c in 0..l.tokens.cols {
                    assert_eq!(l.tokens.token(r, c), first.as_slice());
                }
            }
        }
    }

    #[test]
    fn too_small_image_is_input_error() {
        let bb = Backbone::synthetic(spec()).unwrap();
        let img = ImagePlane::from_gray(15, 40, vec![0.0; 15 * 40]).unwrap();
        assert!(matches!(bb.encode(&img), Err(Error::Input(_))));
    }

    #[test]
    fn grayscale_rgb_inputs_agree() {
        let bb = Backbone::synthetic(spec()).unwrap();
        let gray: Vec<f32> = (0..32 * 32).map(|i| (i % 13) as f32).collect();
        let rgb: Vec<f32> = gray.iter().flat_map(|&v| [v, v, v]).collect();
        let a = bb.encode(&ImagePlane::from_gray(32, 32, gray).unwrap()).unwrap();
        let b = bb
            .encode(&ImagePlane::new(32, 32, 3, rgb, 1.0).unwrap())
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_patches_differ_only_in_mean() {
        let p = SyntheticProvider::new(&spec());
        let zero = p.isolated_token(&[0.0; 256]);
        let one = p.isolated_token(&[1.0; 256]);
        for (i, (a, b)) in zero.iter().zip(&one).enumerate() {
            if i % SYNTHETIC_STATS == 0 {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn checkerboard_token_distance_matches_hand_computation() {
        // Hand-evaluated statistics of a 0/1 checkerboard at full resolution:
        // mean 0.5, std 0.5, |dx| = |dy| = 1, both diagonals 0, MAD 0.5,
        // range 1. A constant 0.5 patch has mean 0.5 and all else 0. After
        // gains (2, 4, 4, 4, 4, 4, 4, 2) the per-stat differences are
        // (0, 2, 4, 4, 0, 0, 2, 2), each repeated 768 / 8 = 96 times.
        let expected = (96.0f64 * (4.0 + 16.0 + 16.0 + 4.0 + 4.0)).sqrt();
        let p = SyntheticProvider::new(&spec());
        let checker: Vec<f32> = (0..256).map(|i| ((i / 16 + i % 16) % 2) as f32).collect();
        let a = p.isolated_token(&checker);
        let b = p.isolated_token(&[0.5; 256]);
        let d: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((d - expected).abs() < 1e-4, "{d} vs {expected}");
    }

    #[test]
    fn context_grows_with_depth() {
        let p = SyntheticProvider::new(&spec());
        let r: Vec<usize> = [3, 6, 9, 12].iter().map(|&l| p.context_radius(l)).collect();
        assert_eq!(r, vec![0, 1, 2, 3]);
    }

    #[test]
    fn context_half_is_a_neighbourhood_mean() {
        let p = SyntheticProvider::new(&BackboneSpec { hidden_dim: 16, ..spec() });
        // 3 x 1 patches with intensities 0, 1, 0 (each patch constant)
        let data: Vec<f32> = (0..16 * 48).map(|i| if (i % 48) / 16 == 1 { 1.0 } else { 0.0 }).collect();
        let img = ImagePlane::from_gray(48, 16, data).unwrap();
        let g = p.extract(&img, &[3, 6]).unwrap();
        // scaled mean is 2 * m - 1: -1 for dark patches, +1 for the bright one
        assert_eq!(g[0].token(0, 0)[0], -1.0);
        assert_eq!(g[0].token(0, 0)[8], -1.0);
        // radius 1 with reflected borders: column -1 reads column 1
        assert!((g[1].token(0, 0)[8] - (1.0 - 1.0 + 1.0) / 3.0).abs() < 1e-6);
        assert!((g[1].token(0, 1)[8] - (-1.0 + 1.0 - 1.0) / 3.0).abs() < 1e-6);
        assert_eq!(g[1].token(0, 1)[0], 1.0);
    }
}
