//! Overlap and surface-distance scores of a predicted label mask against a
//! dense reference.
//!
//! Pixels labeled 255 in the reference are left out of every count and of
//! both boundary sets. Boundaries are the pixels of a class that have a
//! 4-neighbour outside the class (the image border counts as outside).
//! HD95 and ASSD are the linear-interpolated 95th percentile and the mean of
//! the union of both directed boundary-to-boundary distance sets.
//!
//! Empty classes: when neither mask contains the class, overlap scores are 1,
//! distances are undefined and the row is left out of the overall means.
//! When only one mask contains it, overlap scores are 0 and distances are
//! undefined.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::mask::{ClassTable, LabelMask, IGNORE};
use crate::stats::percentile_sorted;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

fn check_shapes(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Input(format!(
            "prediction is {}x{} but the reference is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

pub fn confusion(pred: &LabelMask, gt: &LabelMask, class_id: u8) -> Result<Confusion> {
    check_shapes(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g == IGNORE {
            continue;
        }
        match (p == class_id, g == class_id) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

impl Confusion {
    pub fn pred_empty(&self) -> bool {
        self.tp + self.fp == 0
    }

    pub fn gt_empty(&self) -> bool {
        self.tp + self.fn_ == 0
    }

    pub fn overlap(&self) -> Overlap {
        if self.pred_empty() && self.gt_empty() {
            return Overlap {
                dsc: 1.0,
                iou: 1.0,
                recall: 1.0,
                precision: 1.0,
            };
        }
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let (tp, fp, fn_) = (self.tp, self.fp, self.fn_);
        Overlap {
            dsc: ratio(2 * tp, 2 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
            recall: ratio(tp, tp + fn_),
            precision: ratio(tp, tp + fp),
        }
    }
}

pub fn overlap_metrics(pred: &LabelMask, gt: &LabelMask, class_id: u8) -> Result<Overlap> {
    Ok(confusion(pred, gt, class_id)?.overlap())
}

/// Pixels of `mask` with a 4-neighbour outside it or outside the image.
pub fn boundary(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            let interior = x > 0
                && x + 1 < width
                && y > 0
                && y + 1 < height
                && mask[i - 1]
                && mask[i + 1]
                && mask[i - width]
                && mask[i + width];
            out[i] = !interior;
        }
    }
    out
}

const FAR: f64 = 1e20;

/// One pass of the lower-envelope-of-parabolas transform over `f`.
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        let mut s = meet(q, v[k]);
        // z[0] is -inf, so k never drops below 0
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of `seeds` (Felzenszwalb and Huttenlocher). Returns values of at
/// least 1e20 where `seeds` is empty.
pub fn squared_distance_transform(seeds: &[bool], width: usize, height: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let n = width.max(height);
    let (mut f, mut d) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut d[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = d[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&grid[y * width..(y + 1) * width]);
        edt_1d(&f[..width], &mut d[..width], &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&d[..width]);
    }
    grid
}

/// Directed boundary distances of `pred` to `gt` and back, in pixels,
/// concatenated and sorted. `None` if either class is empty.
pub fn boundary_distances(pred: &LabelMask, gt: &LabelMask, class_id: u8) -> Result<Option<Vec<f64>>> {
    check_shapes(pred, gt)?;
    let (w, h) = (pred.width(), pred.height());
    let a: Vec<bool> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| p == class_id && g != IGNORE)
        .collect();
    let b: Vec<bool> = gt.data().iter().map(|&g| g == class_id).collect();
    if !a.iter().any(|&v| v) || !b.iter().any(|&v| v) {
        return Ok(None);
    }
    let (ba, bb) = (boundary(&a, w, h), boundary(&b, w, h));
    let (da, db) = (squared_distance_transform(&ba, w, h), squared_distance_transform(&bb, w, h));
    let mut out = Vec::new();
    for i in 0..w * h {
        if ba[i] {
            out.push(db[i].sqrt());
        }
        if bb[i] {
            out.push(da[i].sqrt());
        }
    }
    out.sort_by(f64::total_cmp);
    Ok(Some(out))
}

/// `(hd95_um, assd_um)`, or `None` when either class is empty.
pub fn surface_distances(pred: &LabelMask, gt: &LabelMask, class_id: u8, spacing_um: f64) -> Result<Option<(f64, f64)>> {
    Ok(boundary_distances(pred, gt, class_id)?.map(|d| {
        let hd95 = percentile_sorted(&d, 95.0);
        let assd = d.iter().sum::<f64>() / d.len() as f64;
        (hd95 * spacing_um, assd * spacing_um)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub name: String,
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub hd95_um: Option<f64>,
    pub assd_um: Option<f64>,
    /// False when the class is absent from both masks; such rows do not
    /// enter the overall means.
    pub defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub dsc: Option<f64>,
    pub iou: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub hd95_um: Option<f64>,
    pub assd_um: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub spacing_um: f64,
    pub classes: Vec<ClassMetrics>,
    pub overall: OverallMetrics,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn class_metrics(pred: &LabelMask, gt: &LabelMask, class_id: u8, name: &str, spacing_um: f64) -> Result<ClassMetrics> {
    let c = confusion(pred, gt, class_id)?;
    let o = c.overlap();
    let dist = surface_distances(pred, gt, class_id, spacing_um)?;
    Ok(ClassMetrics {
        class_id,
        name: name.to_string(),
        dsc: o.dsc,
        iou: o.iou,
        recall: o.recall,
        precision: o.precision,
        hd95_um: dist.map(|d| d.0),
        assd_um: dist.map(|d| d.1),
        defined: !(c.pred_empty() && c.gt_empty()),
    })
}

pub fn evaluate(pred: &LabelMask, gt: &LabelMask, classes: &ClassTable, spacing_um: f64) -> Result<MetricsReport> {
    check_shapes(pred, gt)?;
    if !(spacing_um > 0.0 && spacing_um.is_finite()) {
        return Err(Error::Input(format!("spacing must be positive, got {spacing_um}")));
    }
    let rows = classes
        .classes
        .iter()
        .map(|c| class_metrics(pred, gt, c.id, &c.name, spacing_um))
        .collect::<Result<Vec<_>>>()?;
    let defined = || rows.iter().filter(|r| r.defined);
    let overall = OverallMetrics {
        dsc: mean(defined().map(|r| r.dsc)),
        iou: mean(defined().map(|r| r.iou)),
        recall: mean(defined().map(|r| r.recall)),
        precision: mean(defined().map(|r| r.precision)),
        hd95_um: mean(defined().filter_map(|r| r.hd95_um)),
        assd_um: mean(defined().filter_map(|r| r.assd_um)),
    };
    Ok(MetricsReport {
        spacing_um,
        classes: rows,
        overall,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

impl MetricsReport {
    /// One row per class then `overall`; undefined values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,name,DSC,IoU,Rec.,Prec.,HD95 (um),ASSD (um),defined\n");
        for r in &self.classes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.class_id,
                r.name.replace(',', " "),
                r.dsc,
                r.iou,
                r.recall,
                r.precision,
                cell(r.hd95_um),
                cell(r.assd_um),
                r.defined
            );
        }
        let o = &self.overall;
        let _ = writeln!(
            s,
            "overall,overall,{},{},{},{},{},{},{}",
            cell(o.dsc),
            cell(o.iou),
            cell(o.recall),
            cell(o.precision),
            cell(o.hd95_um),
            cell(o.assd_um),
            o.dsc.is_some()
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `<prefix>.csv` and `<prefix>.json`.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        write_atomic(&prefix.with_extension("csv"), self.to_csv().as_bytes())?;
        write_atomic(&prefix.with_extension("json"), self.to_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, data: &[u8]) -> LabelMask {
        LabelMask::new(w, h, data.to_vec()).unwrap()
    }

    #[test]
    fn identical_masks_are_perfect() {
        let m = mask(4, 2, &[0, 0, 1, 1, 0, 1, 1, 1]);
        let o = overlap_metrics(&m, &m, 1).unwrap();
        assert_eq!((o.dsc, o.iou, o.recall, o.precision), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(surface_distances(&m, &m, 1, 3.0).unwrap(), Some((0.0, 0.0)));
    }

    #[test]
    fn hand_counted_confusion() {
        let gt = mask(4, 1, &[1, 1, 1, 1]);
        let pred = mask(4, 1, &[1, 1, 0, 0]);
        let o = overlap_metrics(&pred, &gt, 1).unwrap();
        assert!((o.dsc - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((o.iou, o.recall, o.precision), (0.5, 0.5, 1.0));
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let gt = mask(2, 1, &[1, 0]);
        let pred = mask(2, 1, &[0, 1]);
        let o = overlap_metrics(&pred, &gt, 1).unwrap();
        assert_eq!((o.dsc, o.iou, o.recall, o.precision), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn single_pixels_five_apart() {
        let mut a = LabelMask::filled(10, 3, 0);
        let mut b = LabelMask::filled(10, 3, 0);
        a.set(2, 1, 1);
        b.set(7, 1, 1);
        assert_eq!(surface_distances(&a, &b, 1, 4.0).unwrap(), Some((20.0, 20.0)));
    }

    #[test]
    fn ignore_pixels_are_excluded() {
        let gt = mask(3, 1, &[1, IGNORE, 0]);
        let pred = mask(3, 1, &[1, 1, 1]);
        let c = confusion(&pred, &gt, 1).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, fn_: 0 });
    }

    #[test]
    fn absent_class_does_not_move_overall() {
        let gt = mask(2, 2, &[0, 0, 1, 1]);
        let report = evaluate(&gt, &gt, &ClassTable::default_for(3), 1.0).unwrap();
        assert!(!report.classes[2].defined);
        assert_eq!(report.classes[2].hd95_um, None);
        assert_eq!(report.overall.dsc, Some(1.0));
        assert_eq!(report.overall.hd95_um, Some(0.0));
    }

    #[test]
    fn false_positive_class_counts_as_zero() {
        let gt = mask(2, 2, &[0, 0, 0, 0]);
        let pred = mask(2, 2, &[0, 0, 0, 1]);
        let report = evaluate(&pred, &gt, &ClassTable::default_for(2), 1.0).unwrap();
        let r = &report.classes[1];
        assert!(r.defined);
        assert_eq!((r.dsc, r.precision, r.hd95_um), (0.0, 0.0, None));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(evaluate(&mask(2, 1, &[0, 1]), &mask(1, 2, &[0, 1]), &ClassTable::default_for(2), 1.0).is_err());
    }

    #[test]
    fn boundary_of_solid_block() {
        let m: Vec<bool> = (0..25).map(|i| (1..4).contains(&(i % 5)) && (1..4).contains(&(i / 5))).collect();
        let b = boundary(&m, 5, 5);
        assert_eq!(b.iter().filter(|&&v| v).count(), 8);
        assert!(!b[12]);
    }

    #[test]
    fn distance_transform_small_case() {
        let mut seeds = vec![false; 12];
        seeds[0] = true;
        seeds[11] = true;
        let d = squared_distance_transform(&seeds, 4, 3);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[3], 4.0);
        assert_eq!(d[5], 2.0);
        assert_eq!(d[6], 2.0);
    }

    #[test]
    fn csv_has_table_column_order() {
        let gt = mask(2, 2, &[0, 0, 1, 1]);
        let csv = evaluate(&gt, &gt, &ClassTable::default_for(2), 1.0).unwrap().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "class,name,DSC,IoU,Rec.,Prec.,HD95 (um),ASSD (um),defined");
        assert_eq!(lines.last().unwrap(), "overall,overall,1,1,1,1,0,0,true");
    }
}
