//! Dense kernels on row-major `rows x cols x channels` grids.

use crate::backbone::reflect;

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and
/// `op(b)` of shape `k x n`; all buffers row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gathers the reflect-padded 3x3 neighbourhood of every cell:
/// output row `r * cols + c` holds 9 blocks of `ch` values ordered by
/// kernel offset `(dy, dx)` in row-major order.
pub fn im2col3x3(x: &[f32], rows: usize, cols: usize, ch: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols * 9 * ch];
    for r in 0..rows {
        for c in 0..cols {
            let dst = (r * cols + c) * 9 * ch;
            for (t, (dy, dx)) in KERNEL_OFFSETS.iter().enumerate() {
                let sr = reflect(r as isize + dy, rows);
                let sc = reflect(c as isize + dx, cols);
                let src = (sr * cols + sc) * ch;
                out[dst + t * ch..dst + (t + 1) * ch].copy_from_slice(&x[src..src + ch]);
            }
        }
    }
    out
}

/// Adjoint of [`im2col3x3`]: scatters column gradients back to cells.
pub fn col2im3x3(dcol: &[f32], rows: usize, cols: usize, ch: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols * ch];
    for r in 0..rows {
        for c in 0..cols {
            let src = (r * cols + c) * 9 * ch;
            for (t, (dy, dx)) in KERNEL_OFFSETS.iter().enumerate() {
                let sr = reflect(r as isize + dy, rows);
                let sc = reflect(c as isize + dx, cols);
                let dst = (sr * cols + sc) * ch;
                for (o, g) in out[dst..dst + ch]
                    .iter_mut()
                    .zip(&dcol[src + t * ch..src + (t + 1) * ch])
                {
                    *o += g;
                }
            }
        }
    }
    out
}

const KERNEL_OFFSETS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Per-output-index source taps for 1-D linear interpolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    /// Weight of `i1`; `i0` gets `1 - frac`.
    pub frac: f32,
}

/// Taps for resampling `n_in` samples to `n_out` with pixel-centre
/// alignment: output index `o` reads input coordinate
/// `(o + 0.5) * n_in / n_out - 0.5`, clamped to the valid range.
pub fn linear_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            Tap {
                i0,
                i1,
                frac: (src - i0 as f64) as f32,
            }
        })
        .collect()
}

/// Bilinear resize of an HWC grid.
pub fn resize_bilinear(
    x: &[f32],
    rows: usize,
    cols: usize,
    ch: usize,
    out_rows: usize,
    out_cols: usize,
) -> Vec<f32> {
    if rows == out_rows && cols == out_cols {
        return x.to_vec();
    }
    let ty = linear_taps(rows, out_rows);
    let tx = linear_taps(cols, out_cols);
    let mut out = vec![0.0f32; out_rows * out_cols * ch];
    for (oy, a) in ty.iter().enumerate() {
        for (ox, b) in tx.iter().enumerate() {
            let w00 = (1.0 - a.frac) * (1.0 - b.frac);
            let w01 = (1.0 - a.frac) * b.frac;
            let w10 = a.frac * (1.0 - b.frac);
            let w11 = a.frac * b.frac;
            let p00 = (a.i0 * cols + b.i0) * ch;
            let p01 = (a.i0 * cols + b.i1) * ch;
            let p10 = (a.i1 * cols + b.i0) * ch;
            let p11 = (a.i1 * cols + b.i1) * ch;
            let dst = (oy * out_cols + ox) * ch;
            for k in 0..ch {
                out[dst + k] =
                    w00 * x[p00 + k] + w01 * x[p01 + k] + w10 * x[p10 + k] + w11 * x[p11 + k];
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(
    dy: &[f32],
    rows: usize,
    cols: usize,
    ch: usize,
    out_rows: usize,
    out_cols: usize,
) -> Vec<f32> {
    if rows == out_rows && cols == out_cols {
        return dy.to_vec();
    }
    let ty = linear_taps(rows, out_rows);
    let tx = linear_taps(cols, out_cols);
    let mut dx = vec![0.0f32; rows * cols * ch];
    for (oy, a) in ty.iter().enumerate() {
        for (ox, b) in tx.iter().enumerate() {
            let w = [
                ((1.0 - a.frac) * (1.0 - b.frac), a.i0, b.i0),
                ((1.0 - a.frac) * b.frac, a.i0, b.i1),
                (a.frac * (1.0 - b.frac), a.i1, b.i0),
                (a.frac * b.frac, a.i1, b.i1),
            ];
            let src = (oy * out_cols + ox) * ch;
            for (wt, r, c) in w {
                let dst = (r * cols + c) * ch;
                for k in 0..ch {
                    dx[dst + k] += wt * dy[src + k];
                }
            }
        }
    }
    dx
}
