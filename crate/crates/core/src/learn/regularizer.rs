//! Difference operators `D_k` (kernel) and `D_f` (profile).

use crate::conv::{KernelDims, SparseRows};

/// Axial and lateral first differences over the `kz × kx` kernel image.
pub fn kernel_difference_operator(dims: KernelDims, axial: f64, lateral: f64) -> SparseRows {
    let (kz, kx) = (dims.kz, dims.kx);
    let mut rows = Vec::new();
    for a in 0..kz.saturating_sub(1) {
        for b in 0..kx {
            rows.push(vec![(a * kx + b, -axial), ((a + 1) * kx + b, axial)]);
        }
    }
    for a in 0..kz {
        for b in 0..kx.saturating_sub(1) {
            rows.push(vec![(a * kx + b, -lateral), (a * kx + b + 1, lateral)]);
        }
    }
    SparseRows {
        rows,
        ncols: dims.len(),
    }
}

/// Regularizer of a `(2 nz) × n_c` profile matrix, vectorized row-major:
/// lateral differences inside each row, axial differences between
/// consecutive depths of the same half, and pin rows on both outer taps.
pub fn profile_difference_operator(nz: usize, n_c: usize, axial: f64, lateral: f64, pin: f64) -> SparseRows {
    let idx = |half: usize, row: usize, tap: usize| (half * nz + row) * n_c + tap;
    let mut rows = Vec::new();
    for half in 0..2 {
        for r in 0..nz {
            for t in 0..n_c.saturating_sub(1) {
                rows.push(vec![(idx(half, r, t), -lateral), (idx(half, r, t + 1), lateral)]);
            }
        }
        for r in 0..nz.saturating_sub(1) {
            for t in 0..n_c {
                rows.push(vec![(idx(half, r, t), -axial), (idx(half, r + 1, t), axial)]);
            }
        }
        if n_c > 1 {
            for r in 0..nz {
                rows.push(vec![(idx(half, r, 0), pin)]);
                rows.push(vec![(idx(half, r, n_c - 1), pin)]);
            }
        }
    }
    SparseRows {
        rows,
        ncols: 2 * nz * n_c,
    }
}
