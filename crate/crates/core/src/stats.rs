//! Small numeric helpers shared by several modules.

use std::cmp::Ordering;

/// Percentile `q` in `[0, 100]` of an already sorted slice, using linear
/// interpolation between closest ranks (`(n - 1) * q / 100` position).
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Percentile of unsorted data without a full sort.
pub fn percentile_f32(values: &mut [f32], q: f64) -> f32 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let n = values.len();
    let pos = (q / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = (pos - lo as f64) as f32;
    let cmp = |a: &f32, b: &f32| a.partial_cmp(b).unwrap_or(Ordering::Equal);
    let (_, lo_val, upper) = values.select_nth_unstable_by(lo, cmp);
    let lo_val = *lo_val;
    if frac == 0.0 || upper.is_empty() {
        return lo_val;
    }
    let hi_val = upper.iter().copied().fold(f32::INFINITY, f32::min);
    lo_val + (hi_val - lo_val) * frac
}
