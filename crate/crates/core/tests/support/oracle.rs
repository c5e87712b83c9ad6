//! Brute-force reference implementations used by the test suites.
//!
//! Nothing here calls into the library's metric code; distances are found by
//! comparing every boundary pixel against every other.

#![allow(dead_code)]

use rand::Rng;
use scribseg::mask::{LabelMask, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleRow {
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
    pub defined: bool,
}

fn edge_pixels(member: &dyn Fn(i64, i64) -> bool, w: i64, h: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !member(x, y) {
                continue;
            }
            let outside = |x: i64, y: i64| x < 0 || y < 0 || x >= w || y >= h || !member(x, y);
            if outside(x - 1, y) || outside(x + 1, y) || outside(x, y - 1) || outside(x, y + 1) {
                out.push((x, y));
            }
        }
    }
    out
}

fn nearest(p: (i64, i64), set: &[(i64, i64)]) -> f64 {
    set.iter()
        .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
        .fold(f64::INFINITY, f64::min)
}

fn percentile_95(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Scores for one class; reference pixels labeled 255 are skipped entirely.
pub fn oracle_row(pred: &LabelMask, gt: &LabelMask, class: u8, spacing: f64) -> OracleRow {
    let (w, h) = (pred.width() as i64, pred.height() as i64);
    let at = |m: &LabelMask, x: i64, y: i64| m.data()[(y * w + x) as usize];
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for y in 0..h {
        for x in 0..w {
            let g = at(gt, x, y);
            if g == IGNORE {
                continue;
            }
            let (p, g) = (at(pred, x, y) == class, g == class);
            tp += (p && g) as u64;
            fp += (p && !g) as u64;
            fn_ += (!p && g) as u64;
        }
    }
    let in_pred = |x: i64, y: i64| at(pred, x, y) == class && at(gt, x, y) != IGNORE;
    let in_gt = |x: i64, y: i64| at(gt, x, y) == class;
    let pred_empty = tp + fp == 0;
    let gt_empty = tp + fn_ == 0;
    if pred_empty && gt_empty {
        return OracleRow {
            dsc: 1.0,
            iou: 1.0,
            recall: 1.0,
            precision: 1.0,
            hd95: None,
            assd: None,
            defined: false,
        };
    }
    let frac = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut hd95, mut assd) = (None, None);
    if !pred_empty && !gt_empty {
        let a = edge_pixels(&in_pred, w, h);
        let b = edge_pixels(&in_gt, w, h);
        let mut d: Vec<f64> = a.iter().map(|&p| nearest(p, &b)).collect();
        d.extend(b.iter().map(|&p| nearest(p, &a)));
        assd = Some(d.iter().sum::<f64>() / d.len() as f64 * spacing);
        hd95 = Some(percentile_95(d) * spacing);
    }
    OracleRow {
        dsc: frac(2 * tp, 2 * tp + fp + fn_),
        iou: frac(tp, tp + fp + fn_),
        recall: frac(tp, tp + fn_),
        precision: frac(tp, tp + fp),
        hd95,
        assd,
        defined: true,
    }
}

/// A mask of random discs and rectangles over a random background, with
/// optional salt noise and ignore pixels.
pub fn random_mask<R: Rng>(rng: &mut R, w: usize, h: usize, k: u8, allow_ignore: bool) -> LabelMask {
    let mut m = LabelMask::filled(w, h, rng.random_range(0..k));
    for _ in 0..rng.random_range(0..6) {
        let c = rng.random_range(0..k);
        let (cx, cy) = (rng.random_range(0..w) as i64, rng.random_range(0..h) as i64);
        let r = rng.random_range(0..=(w.max(h) / 3).max(1)) as i64;
        let disc = rng.random_bool(0.5);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (dx, dy) = (x - cx, y - cy);
                let hit = if disc { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= r / 2 };
                if hit {
                    m.set(x as usize, y as usize, c);
                }
            }
        }
    }
    let noise: f64 = if rng.random_bool(0.3) { rng.random_range(0.0..0.1) } else { 0.0 };
    let ignore: f64 = if allow_ignore && rng.random_bool(0.3) { rng.random_range(0.0..0.1) } else { 0.0 };
    for v in m.data_mut() {
        if rng.random_bool(noise) {
            *v = rng.random_range(0..k);
        }
        if rng.random_bool(ignore) {
            *v = IGNORE;
        }
    }
    m
}

/// A prediction near `gt`: a copy with a few regions relabeled.
pub fn perturb<R: Rng>(rng: &mut R, gt: &LabelMask, k: u8) -> LabelMask {
    let mut p = gt.clone();
    let other = random_mask(rng, gt.width(), gt.height(), k, false);
    let keep: f64 = rng.random_range(0.0..1.0);
    for (v, &o) in p.data_mut().iter_mut().zip(other.data()) {
        if *v == IGNORE || !rng.random_bool(keep) {
            *v = o;
        }
    }
    p
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || a == b
}

fn same_option(name: &str, got: Option<f64>, want: Option<f64>, tol: f64) -> Result<(), String> {
    match (got, want) {
        (None, None) => Ok(()),
        (Some(a), Some(b)) if rel_close(a, b, tol) => Ok(()),
        _ => Err(format!("{name}: library {got:?}, oracle {want:?}")),
    }
}

/// Compares `evaluate` against the oracle for every class, then checks the
/// DSC/IoU identity and that distances scale linearly with spacing.
pub fn check_pair(pred: &LabelMask, gt: &LabelMask, k: usize, spacing: f64) -> Result<(), String> {
    use scribseg::mask::ClassTable;
    use scribseg::metrics::evaluate;
    let table = ClassTable::default_for(k);
    let report = evaluate(pred, gt, &table, spacing).map_err(|e| e.to_string())?;
    let unit = evaluate(pred, gt, &table, 1.0).map_err(|e| e.to_string())?;
    for (row, unit_row) in report.classes.iter().zip(&unit.classes) {
        let o = oracle_row(pred, gt, row.class_id, spacing);
        let c = row.class_id;
        let exact = [("DSC", row.dsc, o.dsc), ("IoU", row.iou, o.iou), ("Rec.", row.recall, o.recall), ("Prec.", row.precision, o.precision)];
        for (name, got, want) in exact {
            if got != want {
                return Err(format!("class {c} {name}: library {got}, oracle {want}"));
            }
        }
        if row.defined != o.defined {
            return Err(format!("class {c}: defined flag {} vs {}", row.defined, o.defined));
        }
        same_option(&format!("class {c} HD95"), row.hd95_um, o.hd95, 1e-9)?;
        same_option(&format!("class {c} ASSD"), row.assd_um, o.assd, 1e-9)?;
        // identity between the two overlap scores
        let from_iou = 2.0 * row.iou / (1.0 + row.iou);
        if (row.dsc - from_iou).abs() > 1e-9 {
            return Err(format!("class {c}: DSC {} but 2J/(1+J) = {from_iou}", row.dsc));
        }
        // distances scale with spacing, overlap scores do not
        if (row.dsc, row.iou, row.recall, row.precision) != (unit_row.dsc, unit_row.iou, unit_row.recall, unit_row.precision) {
            return Err(format!("class {c}: overlap scores depend on spacing"));
        }
        same_option(&format!("class {c} HD95 scale"), row.hd95_um, unit_row.hd95_um.map(|v| v * spacing), 1e-9)?;
        same_option(&format!("class {c} ASSD scale"), row.assd_um, unit_row.assd_um.map(|v| v * spacing), 1e-9)?;
    }
    Ok(())
}
