//! Constrained learning: kernel = centerline path ⊛ learned lateral profile.
//!
//! The differential line kernel splits into two signed halves, `+tx(θ1)` and
//! `−tx(θ2)` (the shared receive leg cancels). Each depth row of each half
//! gets its own lateral filter of `n_c` taps; the kernel is the row-wise
//! lateral convolution of the halves with their filters, which is linear in
//! the filters: `vec(k) = G_p vec(f)`.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::conv::{Kernel, KernelDims};
use crate::error::{Error, Result};
use crate::geometry::{ImagingGrid, PathLegs, SteeringPair};
use crate::linalg::solve_certified;

use super::regularizer::profile_difference_operator;
use super::system::StackedSystem;
use super::{LearnedKernel, PairRef, RegularizerSpec, TrainingSample};

/// Per-depth lateral filters, `(2 nz) × n_c`. Rows `0..nz` shape the θ1 half
/// of the path, rows `nz..2nz` the θ2 half; tap `(n_c − 1) / 2` is the
/// centerline.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileMatrix {
    pub values: Array2<f64>,
}

impl ProfileMatrix {
    pub fn n_c(&self) -> usize {
        self.values.ncols()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }

    pub fn from_vec(nz: usize, n_c: usize, v: Vec<f64>) -> Result<Self> {
        let values = Array2::from_shape_vec((2 * nz, n_c), v)
            .map_err(|e| Error::Shape(format!("profile vector: {e}")))?;
        Ok(Self { values })
    }
}

#[derive(Debug, Clone)]
pub struct PathBasis {
    pub dims: KernelDims,
    pub n_c: usize,
    pub pair: SteeringPair,
    /// Signed centerline halves on the kernel grid: `[+tx1, −tx2]`.
    pub halves: [Array2<f64>; 2],
    /// Sparse columns of `G_p`: `(kernel index, value)`.
    columns: Vec<Vec<(usize, f64)>>,
}

impl PathBasis {
    pub fn n_params(&self) -> usize {
        self.columns.len()
    }

    fn nz(&self) -> usize {
        self.dims.kz
    }

    /// `G_p f` as a kernel image.
    pub fn apply(&self, f: &[f64]) -> Array2<f64> {
        let mut k = Array2::zeros((self.dims.kz, self.dims.kx));
        let flat = k.as_slice_mut().expect("standard layout");
        for (col, &w) in self.columns.iter().zip(f) {
            if w == 0.0 {
                continue;
            }
            for &(i, v) in col {
                flat[i] += w * v;
            }
        }
        k
    }

    /// `G_pᵀ k`.
    pub fn apply_t(&self, k: &Array2<f64>) -> Vec<f64> {
        let flat = k.as_slice().expect("standard layout");
        self.columns
            .iter()
            .map(|col| col.iter().map(|&(i, v)| v * flat[i]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.dims.len(), self.n_params());
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                g[(i, j)] += v;
            }
        }
        g
    }

    /// Profile that reproduces the bare line kernel: a unit center tap.
    pub fn delta_profile(&self) -> ProfileMatrix {
        let mut values = Array2::zeros((2 * self.nz(), self.n_c));
        values.column_mut((self.n_c - 1) / 2).fill(1.0);
        ProfileMatrix { values }
    }

    /// `Gᵀ M G` for a dense kernel-space Gram matrix `M`.
    fn project_gram(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.dims.len();
        let f = self.n_params();
        let mut mg = DMatrix::zeros(k, f);
        for (j, col) in self.columns.iter().enumerate() {
            let mut dst = mg.column_mut(j);
            for &(i, v) in col {
                dst.axpy(v, &m.column(i), 1.0);
            }
        }
        let mut out = DMatrix::zeros(f, f);
        for (a, col) in self.columns.iter().enumerate() {
            for b in 0..f {
                out[(a, b)] = col.iter().map(|&(i, v)| v * mg[(i, b)]).sum();
            }
        }
        // Symmetrize away summation-order noise.
        let t = out.transpose();
        (out + t) * 0.5
    }
}

/// Builds `G_p`: for half `h`, depth row `r` and tap `t`, the column holds
/// row `r` of that half shifted laterally by `t − (n_c − 1)/2` cells,
/// dropping whatever leaves the kernel.
pub fn build_path_basis(grid: &ImagingGrid, pair: SteeringPair, n_c: usize, dims: KernelDims) -> Result<PathBasis> {
    if n_c == 0 || n_c.is_multiple_of(2) {
        return Err(Error::Parameter(format!("profile length n_c must be odd and >= 1, got {n_c}")));
    }
    let kgrid = dims.kernel_grid(grid);
    let anchor = kgrid.cell_center(dims.anchor_col(), dims.kz - 1);
    let legs = PathLegs::trace(&kgrid, pair, anchor)?;
    let halves = [legs.tx1, -legs.tx2];
    let half_taps = (n_c - 1) / 2;
    let (kz, kx) = (dims.kz, dims.kx);
    let mut columns = Vec::with_capacity(2 * kz * n_c);
    for half in &halves {
        for r in 0..kz {
            let row = half.row(r);
            for t in 0..n_c {
                let shift = t as isize - half_taps as isize;
                let col: Vec<(usize, f64)> = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .filter_map(|(b, &v)| {
                        let dst = b as isize + shift;
                        (0..kx as isize)
                            .contains(&dst)
                            .then(|| (r * kx + dst as usize, v))
                    })
                    .collect();
                columns.push(col);
            }
        }
    }
    Ok(PathBasis {
        dims,
        n_c,
        pair,
        halves,
        columns,
    })
}

/// `k = G_p f`.
pub fn kernel_from_profile(basis: &PathBasis, profile: &ProfileMatrix) -> Result<Kernel> {
    let want = (2 * basis.nz(), basis.n_c);
    if profile.values.dim() != want {
        return Err(Error::Shape(format!(
            "profile is {:?}, basis expects {:?}",
            profile.values.dim(),
            want
        )));
    }
    Kernel::new(basis.apply(&profile.to_vec()), basis.pair)
}

/// Closed-form constrained estimate of the profile (and kernel) for one pair.
pub fn learn_profile_constrained(
    samples: &[TrainingSample],
    pair: PairRef,
    basis: &PathBasis,
    reg: &RegularizerSpec,
) -> Result<LearnedKernel> {
    reg.validate()?;
    if basis.pair != pair.pair {
        return Err(Error::Parameter(format!(
            "basis built for {} used for {}",
            basis.pair, pair.pair
        )));
    }
    let system = StackedSystem::new(samples, basis.dims, &[pair.index])?;
    constrained_on(&system, pair, basis, reg)
}

pub(crate) fn constrained_on(
    system: &StackedSystem<'_>,
    pair: PairRef,
    basis: &PathBasis,
    reg: &RegularizerSpec,
) -> Result<LearnedKernel> {
    if basis.dims != system.dims {
        return Err(Error::Shape(format!(
            "basis kernel dims {:?} vs system {:?}",
            basis.dims, system.dims
        )));
    }
    if system.valid_count(pair.index) == 0 {
        return Err(Error::Data(format!("no valid measurements for pair {}", pair.pair)));
    }
    let nz = basis.nz();
    let n = basis.n_params();
    let mut normal = basis.project_gram(&system.gram(pair.index));
    let lambda = reg.resolve(reg.lambda_f, normal.amax());
    let d = profile_difference_operator(nz, basis.n_c, reg.axial_weight, reg.lateral_weight, reg.pin_weight);
    if lambda > 0.0 {
        normal += d.gram() * lambda;
    }
    let rhs = DVector::from_vec(basis.apply_t(&system.rhs(pair.index)));
    let solved = solve_certified(&normal, &rhs, lambda > 0.0, |f| {
        let k = basis.apply(f.as_slice());
        let mut y = basis.apply_t(&system.apply_gram(pair.index, &k));
        if lambda > 0.0 {
            let dd = d.tmatvec(&d.matvec(f.as_slice()));
            y.iter_mut().zip(dd).for_each(|(a, b)| *a += lambda * b);
        }
        DVector::from_vec(y)
    })
    .map_err(|e| match e {
        Error::Singular(m) => Error::Singular(format!(
            "{m}; constrained system for {} needs lambda_f > 0 or more data",
            pair.pair
        )),
        other => other,
    })?;
    debug_assert_eq!(solved.x.len(), n);
    let profile = ProfileMatrix::from_vec(nz, basis.n_c, solved.x.as_slice().to_vec())?;
    let kernel = kernel_from_profile(basis, &profile)?;
    let fit = system.fit_rmse(pair.index, &kernel.values);
    Ok(LearnedKernel {
        kernel,
        profile: Some(profile),
        fit_rmse_t: fit,
        relative_residual: solved.relative_residual,
        lambda,
    })
}
