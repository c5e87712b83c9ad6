//! Turning pixel scribbles into per-cell supervision and fitting the head.
//!
//! Features for each training window are computed once up front; only the
//! fusion and decoder weights change during training, so every epoch reuses
//! the cached pyramids.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeaturePyramid, PadPlan};
use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::loss::{total_loss, LossConfig, SupervisionGrid};
use crate::mask::{LabelMask, IGNORE};
use crate::model::SegmentationModel;
use crate::optim::AdamW;
use crate::params::NamedParams;

/// Sparse user annotation over an image: 255 marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScribbleMask {
    pub labels: LabelMask,
    pub spacing_um: f64,
    pub provenance: String,
}

impl ScribbleMask {
    pub fn new(labels: LabelMask, spacing_um: f64) -> Self {
        Self {
            labels,
            spacing_um,
            provenance: String::new(),
        }
    }

    /// Checks alignment with `image` and that labels are below `num_classes`.
    pub fn validate(&self, image: &ImagePlane, num_classes: usize) -> Result<()> {
        if self.labels.width() != image.width() || self.labels.height() != image.height() {
            return Err(Error::Input(format!(
                "scribbles are {}x{} but the image is {}x{}",
                self.labels.width(),
                self.labels.height(),
                image.width(),
                image.height()
            )));
        }
        check_label_range(&self.labels, num_classes)
    }

    /// Training needs labeled pixels in at least two classes.
    pub fn check_trainable(&self, num_classes: usize) -> Result<()> {
        check_label_range(&self.labels, num_classes)?;
        let labeled: Vec<u8> = self.labels.classes_present().into_iter().collect();
        match labeled.len() {
            0 => Err(Error::Supervision("no scribbles; label pixels in at least two classes".into())),
            1 => Err(Error::Supervision(format!(
                "only class {} is scribbled; label pixels in at least two classes",
                labeled[0]
            ))),
            _ => Ok(()),
        }
    }
}

fn check_label_range(labels: &LabelMask, num_classes: usize) -> Result<()> {
    if let Some(&bad) = labels
        .data()
        .iter()
        .find(|&&v| v != IGNORE && v as usize >= num_classes)
    {
        return Err(Error::Supervision(format!(
            "label {bad} is not one of the {num_classes} classes"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_full: usize,
    pub epochs_interactive: usize,
    pub roi_size: usize,
    pub seed: u64,
    pub optimizer_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs_full: 50,
            epochs_interactive: 15,
            roi_size: 512,
            seed: 0,
            optimizer_id: "adamw".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.roi_size == 0 || !self.roi_size.is_multiple_of(patch_size) {
            return Err(Error::Config(format!(
                "roi_size {} must be a positive multiple of the patch size {patch_size}",
                self.roi_size
            )));
        }
        if self.optimizer_id != "adamw" {
            return Err(Error::Config(format!(
                "unknown optimizer {:?}; only \"adamw\" is available",
                self.optimizer_id
            )));
        }
        Ok(())
    }
}

/// Majority class among the labeled pixels of each token cell. Cells with
/// no labeled pixels, or with a tie for the majority, are ignored. Cells
/// follow the same centred padding as [`Backbone::encode`]; padded pixels
/// carry no labels.
pub fn rasterize_scribbles(scribbles: &LabelMask, patch_size: usize) -> SupervisionGrid {
    let pad = PadPlan::new(scribbles.height(), scribbles.width(), patch_size);
    let (rows, cols) = (pad.rows(patch_size), pad.cols(patch_size));
    let mut counts = vec![[0u32; 256]; cols];
    let mut labels = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in counts.iter_mut() {
            c.fill(0);
        }
        for py in r * patch_size..(r + 1) * patch_size {
            let Some(y) = py.checked_sub(pad.top).filter(|&y| y < pad.source_h) else {
                continue;
            };
            for px in 0..pad.padded_w {
                let Some(x) = px.checked_sub(pad.left).filter(|&x| x < pad.source_w) else {
                    continue;
                };
                let v = scribbles.get(x, y);
                if v != IGNORE {
                    counts[px / patch_size][v as usize] += 1;
                }
            }
        }
        for cell in &counts {
            let mut best = IGNORE;
            let mut best_n = 0;
            let mut tied = false;
            for (class, &n) in cell.iter().enumerate().take(IGNORE as usize) {
                if n > best_n {
                    best = class as u8;
                    best_n = n;
                    tied = false;
                } else if n == best_n && n > 0 {
                    tied = true;
                }
            }
            labels.push(if tied { IGNORE } else { best });
        }
    }
    SupervisionGrid { rows, cols, labels }
}

/// A training window cut from an image, with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    pub x0: usize,
    pub y0: usize,
    pub image: ImagePlane,
    pub labels: LabelMask,
}

fn clamp_window(center: f64, size: usize, extent: usize) -> usize {
    let start = (center - size as f64 / 2.0).round().max(0.0) as usize;
    start.min(extent - size)
}

/// 8-connected components of `mask`, each as a list of linear indices in
/// scan order of their first pixel.
fn components(width: usize, height: usize, mask: &[bool]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Windows of `roi_size` (or the whole extent, if smaller) covering every
/// labeled pixel. Each window is centred on the centroid of a connected
/// scribble component not yet covered, then clamped inside the image;
/// components that a single window cannot cover are revisited until every
/// labeled pixel lies in some window.
pub fn roi_origins(scribbles: &LabelMask, roi_size: usize) -> Vec<(usize, usize)> {
    let (w, h) = (scribbles.width(), scribbles.height());
    let (rw, rh) = (roi_size.min(w), roi_size.min(h));
    let mut pending: Vec<bool> = scribbles.data().iter().map(|&v| v != IGNORE).collect();
    let mut origins = Vec::new();
    let covers = |(x0, y0): (usize, usize), i: usize| {
        let (x, y) = (i % w, i / w);
        x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh
    };
    while pending.iter().any(|&p| p) {
        for comp in components(w, h, &pending) {
            let left: Vec<usize> = comp.iter().copied().filter(|&i| pending[i]).collect();
            if left.is_empty() {
                continue;
            }
            let n = left.len() as f64;
            let cx = left.iter().map(|&i| (i % w) as f64 + 0.5).sum::<f64>() / n;
            let cy = left.iter().map(|&i| (i / w) as f64 + 0.5).sum::<f64>() / n;
            let mut origin = (clamp_window(cx, rw, w), clamp_window(cy, rh, h));
            if !left.iter().any(|&i| covers(origin, i)) {
                let i = left[0];
                origin = (
                    clamp_window((i % w) as f64 + 0.5, rw, w),
                    clamp_window((i / w) as f64 + 0.5, rh, h),
                );
            }
            for y in origin.1..origin.1 + rh {
                pending[y * w + origin.0..y * w + origin.0 + rw].fill(false);
            }
            origins.push(origin);
        }
    }
    origins
}

/// Crops the windows of [`roi_origins`] out of an aligned image and mask.
pub fn extract_rois(image: &ImagePlane, scribbles: &LabelMask, roi_size: usize) -> Result<Vec<Roi>> {
    check_aligned(image, scribbles)?;
    crop_rois(image, scribbles, roi_size, &roi_origins(scribbles, roi_size))
}

/// Non-overlapping windows over the whole image, the last row and column
/// clamped to the border. Used for dense labels.
pub fn grid_rois(image: &ImagePlane, labels: &LabelMask, roi_size: usize) -> Result<Vec<Roi>> {
    check_aligned(image, labels)?;
    let starts = |extent: usize| -> Vec<usize> {
        let size = roi_size.min(extent);
        let mut v: Vec<usize> = (0..extent.div_ceil(size)).map(|i| (i * size).min(extent - size)).collect();
        v.dedup();
        v
    };
    let mut origins = Vec::new();
    for y in starts(image.height()) {
        for x in starts(image.width()) {
            origins.push((x, y));
        }
    }
    crop_rois(image, labels, roi_size, &origins)
}

fn check_aligned(image: &ImagePlane, labels: &LabelMask) -> Result<()> {
    if image.width() != labels.width() || image.height() != labels.height() {
        return Err(Error::Input(format!(
            "labels are {}x{} but the image is {}x{}",
            labels.width(),
            labels.height(),
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

fn crop_rois(image: &ImagePlane, labels: &LabelMask, roi_size: usize, origins: &[(usize, usize)]) -> Result<Vec<Roi>> {
    let (rw, rh) = (roi_size.min(image.width()), roi_size.min(image.height()));
    origins
        .iter()
        .map(|&(x0, y0)| {
            Ok(Roi {
                x0,
                y0,
                image: image.crop(x0, y0, rw, rh)?,
                labels: labels.crop(x0, y0, rw, rh)?,
            })
        })
        .collect()
}

/// Cached backbone features of one window and their cell supervision.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub pyramid: FeaturePyramid,
    pub target: SupervisionGrid,
}

/// Encodes windows cut from an image that went through [`Backbone::prepare`].
pub fn encode_rois(backbone: &Backbone, rois: &[Roi]) -> Result<Vec<TrainingExample>> {
    let p = backbone.spec().patch_size;
    rois.iter()
        .map(|roi| {
            Ok(TrainingExample {
                pyramid: backbone.encode_prepared(&roi.image)?,
                target: rasterize_scribbles(&roi.labels, p),
            })
        })
        .collect()
}

/// Normalizes the full image once, then cuts and encodes scribble windows.
pub fn scribble_examples(
    backbone: &Backbone,
    image: &ImagePlane,
    scribbles: &LabelMask,
    roi_size: usize,
) -> Result<Vec<TrainingExample>> {
    let prepared = backbone.prepare(image)?;
    encode_rois(backbone, &extract_rois(&prepared, scribbles, roi_size)?)
}

/// Like [`scribble_examples`] but tiles the whole image, for dense labels.
pub fn dense_examples(
    backbone: &Backbone,
    image: &ImagePlane,
    labels: &LabelMask,
    roi_size: usize,
) -> Result<Vec<TrainingExample>> {
    let prepared = backbone.prepare(image)?;
    encode_rois(backbone, &grid_rois(&prepared, labels, roi_size)?)
}

/// Serializable position of the training RNG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128.
    pub word_pos: String,
}

/// Everything besides the weights that training advances.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epochs_done: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            epochs_done: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: hex::encode(self.rng.get_seed()),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(epochs_done: u64, state: &RngState) -> Result<Self> {
        let bad = |what: &str| Error::CorruptCheckpoint(format!("invalid RNG {what}"));
        let seed: [u8; 32] = hex::decode(&state.seed)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| bad("seed"))?;
        let word_pos: u128 = state.word_pos.parse().map_err(|_| bad("position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(word_pos);
        Ok(Self { epochs_done, rng })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    /// Epoch index over the lifetime of the model, starting at 1.
    pub epoch: u64,
    pub loss: f64,
}

/// Runs `epochs` passes over `examples`, one optimizer step per batch, and
/// returns the mean batch loss of each epoch. Batches concatenate the cells
/// of their windows before the loss, so Dice sees the whole batch.
///
/// The model is updated in place; on error it may hold a partial update, so
/// callers that need atomicity should train a clone.
pub fn train(
    model: &mut SegmentationModel,
    examples: &[TrainingExample],
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    epochs: usize,
    state: &mut TrainState,
    mut progress: impl FnMut(&EpochLoss),
) -> Result<Vec<EpochLoss>> {
    loss_cfg.validate()?;
    if let Some(ex) = examples.first() {
        train_cfg.validate(ex.pyramid.patch_size)?;
    } else {
        return Err(Error::Supervision("no training windows; draw at least one scribble".into()));
    }
    let k = model.num_classes();
    let mut supervised = 0;
    for ex in examples {
        for &l in &ex.target.labels {
            if l == loss_cfg.ignore_index {
                continue;
            }
            if l as usize >= k {
                return Err(Error::Supervision(format!("label {l} is not one of the {k} classes")));
            }
            supervised += 1;
        }
    }
    if supervised == 0 {
        return Err(Error::Supervision(
            "no cell has an unambiguous scribble label; draw larger or less mixed scribbles".into(),
        ));
    }

    let mut opt = AdamW::new(train_cfg.lr as f32, train_cfg.weight_decay as f32);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let epoch = state.epochs_done + 1;
        order.shuffle(&mut state.rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (b, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            let mut tapes = Vec::with_capacity(batch.len());
            let mut logits = Vec::new();
            let mut targets = Vec::new();
            for &i in batch {
                let ex = &examples[i];
                let (lg, tape) = model.forward_train(&ex.pyramid, &mut state.rng)?;
                if lg.rows != ex.target.rows || lg.cols != ex.target.cols {
                    return Err(Error::Contract(format!(
                        "logits {}x{} vs supervision {}x{}",
                        lg.rows, lg.cols, ex.target.rows, ex.target.cols
                    )));
                }
                logits.extend(lg.data.iter().map(|&v| v as f64));
                targets.extend_from_slice(&ex.target.labels);
                tapes.push((i, lg.data.len(), tape));
            }
            if targets.iter().all(|&t| t == loss_cfg.ignore_index) {
                continue;
            }
            let tl = {
                let params = model.flat();
                total_loss(&logits, k, &targets, &params, loss_cfg)?
            };
            if !tl.value.is_finite() || tl.grad_logits.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!(
                        "loss {} (focal {}, dice {}, l2 {})",
                        tl.value, tl.focal, tl.dice, tl.l2
                    ),
                });
            }
            let mut grads = model.zero_grads();
            let mut offset = 0;
            for (i, len, tape) in &tapes {
                let d: Vec<f32> = tl.grad_logits[offset..offset + len].iter().map(|&g| g as f32).collect();
                model.backward(&examples[*i].pyramid, tape, &d, &mut grads);
                offset += len;
            }
            let mut t = 0;
            grads.visit_mut(&mut |_, g| {
                for (a, &b) in g.iter_mut().zip(&tl.grad_params[t]) {
                    *a += b as f32;
                }
                t += 1;
            });
            opt.step(model, &grads);
            sum += tl.value;
            batches += 1;
        }
        state.epochs_done = epoch;
        let entry = EpochLoss {
            epoch,
            loss: sum / batches.max(1) as f64,
        };
        progress(&entry);
        trace.push(entry);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(w: usize, h: usize, px: &[(usize, usize, u8)]) -> LabelMask {
        let mut m = LabelMask::filled(w, h, IGNORE);
        for &(x, y, v) in px {
            m.set(x, y, v);
        }
        m
    }

    #[test]
    fn single_labeled_pixel_sets_its_cell() {
        let g = rasterize_scribbles(&mask_with(32, 32, &[(20, 3, 2)]), 16);
        assert_eq!((g.rows, g.cols), (2, 2));
        assert_eq!(g.labels, vec![IGNORE, 2, IGNORE, IGNORE]);
    }

    #[test]
    fn tied_cell_is_ignored() {
        let px: Vec<_> = (0..3).map(|i| (i, 0, 0)).chain((0..3).map(|i| (i, 1, 1))).collect();
        let g = rasterize_scribbles(&mask_with(16, 16, &px), 16);
        assert_eq!(g.labels, vec![IGNORE]);
        let px: Vec<_> = (0..3).map(|i| (i, 0, 0)).chain((0..4).map(|i| (i, 1, 1))).collect();
        assert_eq!(rasterize_scribbles(&mask_with(16, 16, &px), 16).labels, vec![1]);
    }

    #[test]
    fn empty_scribbles_give_all_ignore() {
        let g = rasterize_scribbles(&LabelMask::filled(40, 20, IGNORE), 16);
        assert_eq!((g.rows, g.cols), (2, 3));
        assert!(g.labels.iter().all(|&l| l == IGNORE));
    }

    #[test]
    fn rasterization_follows_centred_padding() {
        // 40 px pad to 48: 4 px on the left, so x = 11 lands in cell 0 and
        // x = 12 in cell 1.
        let g = rasterize_scribbles(&mask_with(40, 16, &[(11, 0, 0), (12, 0, 1)]), 16);
        assert_eq!(g.labels, vec![0, 1, IGNORE]);
    }

    #[test]
    fn one_blob_one_roi() {
        let px: Vec<_> = (0..10).map(|i| (1000 + i, 700, 1)).collect();
        let origins = roi_origins(&mask_with(2048, 2048, &px), 512);
        assert_eq!(origins.len(), 1);
        let (x0, y0) = origins[0];
        assert!(x0 <= 1000 && x0 + 512 > 1009 && y0 <= 700 && y0 + 512 > 700);
    }

    #[test]
    fn corner_scribble_is_clamped_flush() {
        let origins = roi_origins(&mask_with(2048, 2048, &[(2047, 2047, 0)]), 512);
        assert_eq!(origins, vec![(1536, 1536)]);
        let origins = roi_origins(&mask_with(2048, 2048, &[(0, 0, 0)]), 512);
        assert_eq!(origins, vec![(0, 0)]);
    }

    #[test]
    fn small_image_gives_single_whole_roi() {
        let img = ImagePlane::filled(100, 60, 1, 0.5).unwrap();
        let rois = extract_rois(&img, &mask_with(100, 60, &[(5, 5, 0), (90, 50, 1)]), 512).unwrap();
        assert_eq!(rois.len(), 1);
        assert_eq!((rois[0].image.width(), rois[0].image.height()), (100, 60));
    }

    #[test]
    fn long_scribble_is_fully_covered() {
        let px: Vec<_> = (0..2000).map(|i| (i, 1000 + i / 4, 0)).collect();
        let m = mask_with(2048, 2048, &px);
        let origins = roi_origins(&m, 512);
        for &(x, y, _) in &px {
            assert!(origins.iter().any(|&(x0, y0)| x >= x0 && x < x0 + 512 && y >= y0 && y < y0 + 512));
        }
    }

    #[test]
    fn grid_rois_cover_with_clamped_last() {
        let img = ImagePlane::filled(1100, 512, 1, 0.0).unwrap();
        let rois = grid_rois(&img, &LabelMask::filled(1100, 512, 0), 512).unwrap();
        let xs: Vec<_> = rois.iter().map(|r| r.x0).collect();
        assert_eq!(xs, vec![0, 512, 588]);
    }

    #[test]
    fn rng_state_round_trips() {
        use rand::RngCore;
        let mut s = TrainState::new(7);
        s.rng.next_u64();
        let r = TrainState::restore(3, &s.rng_state()).unwrap();
        assert_eq!(r.rng, s.rng);
        assert_eq!(r.epochs_done, 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate(16).is_ok());
        let bad = TrainConfig {
            roi_size: 500,
            ..TrainConfig::default()
        };
        assert!(bad.validate(16).is_err());
        let bad = TrainConfig {
            optimizer_id: "sgd".into(),
            ..TrainConfig::default()
        };
        assert!(bad.validate(16).is_err());
    }
}
