//! Convolutional forward model.
//!
//! A kernel is the differential sensitivity image of the deepest, laterally
//! centered image point. Its anchor is the bottom-center element
//! `(kz − 1, (kx − 1) / 2)`. Any other point's sensitivity is the kernel
//! translated so the anchor lands on that point, with whatever falls outside
//! the field of view dropped. Equivalently the delays are the valid
//! cross-correlation of the kernel with the slowness map padded by `kz − 1`
//! zero rows on top and `(kx − 1) / 2` zero columns on each side.
//!
//! The kernel is used as stored (no flip): "kernel" means the sensitivity
//! image itself.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    trace_line_path, trace_window_path, ImagingGrid, PairSchedule, SteeringPair, WindowConfig,
};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelDims {
    pub kz: usize,
    pub kx: usize,
}

impl KernelDims {
    pub fn new(kz: usize, kx: usize) -> Result<Self> {
        if kz == 0 || kx == 0 || kx.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "kernel dims must be non-empty with odd width, got {kz} x {kx}"
            )));
        }
        Ok(Self { kz, kx })
    }

    /// Full-depth kernel wide enough for every ray of the schedule plus
    /// `margin_cells` of lateral widening on both sides.
    pub fn for_schedule(grid: &ImagingGrid, schedule: &PairSchedule, margin_cells: usize) -> Self {
        let tan = schedule.max_abs_deg().to_radians().tan();
        let reach = (grid.nz as f64 * grid.dz() * tan / grid.dx() - 1e-9).ceil().max(0.0) as usize;
        Self {
            kz: grid.nz,
            kx: 2 * (reach + margin_cells) + 1,
        }
    }

    pub fn anchor_col(&self) -> usize {
        (self.kx - 1) / 2
    }

    pub fn len(&self) -> usize {
        self.kz * self.kx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid the kernel lives on: same spacing as `grid`, `kx × kz` cells.
    pub fn kernel_grid(&self, grid: &ImagingGrid) -> ImagingGrid {
        grid.with_cells(self.kx, self.kz)
    }

    fn of(values: &ArrayView2<f64>) -> Result<Self> {
        let (kz, kx) = values.dim();
        Self::new(kz, kx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    /// `kz × kx`, meters of path per cell.
    pub values: Array2<f64>,
    pub pair: SteeringPair,
}

impl Kernel {
    pub fn new(values: Array2<f64>, pair: SteeringPair) -> Result<Self> {
        KernelDims::of(&values.view())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("kernel for {pair} has non-finite entries")));
        }
        Ok(Self { values, pair })
    }

    pub fn dims(&self) -> KernelDims {
        let (kz, kx) = self.values.dim();
        KernelDims { kz, kx }
    }

    /// `(row, col)` of the tracked point.
    pub fn anchor(&self) -> (usize, usize) {
        let d = self.dims();
        (d.kz - 1, d.anchor_col())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }
}

/// Zero-padded slowness map with the source placed bottom-center.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSlowness {
    pub values: Array2<f64>,
    pub dims: KernelDims,
}

impl PaddedSlowness {
    /// Recovers the unpadded map.
    pub fn crop(&self) -> Array2<f64> {
        let (h, w) = self.values.dim();
        let c = self.dims.anchor_col();
        self.values
            .slice(ndarray::s![self.dims.kz - 1..h, c..w - c])
            .to_owned()
    }
}

pub fn pad_slowness(map: &Array2<f64>, dims: KernelDims) -> PaddedSlowness {
    let (nz, nx) = map.dim();
    let c = dims.anchor_col();
    let mut values = Array2::zeros((nz + dims.kz - 1, nx + dims.kx - 1));
    values
        .slice_mut(ndarray::s![dims.kz - 1.., c..c + nx])
        .assign(map);
    PaddedSlowness { values, dims }
}

/// Column range holding the nonzeros of each kernel row.
fn row_support(kernel: &ArrayView2<f64>) -> Vec<std::ops::Range<usize>> {
    kernel
        .outer_iter()
        .map(|row| {
            let first = row.iter().position(|&v| v != 0.0);
            match first {
                None => 0..0,
                Some(lo) => {
                    let hi = row.len() - row.iter().rev().position(|&v| v != 0.0).unwrap();
                    lo..hi
                }
            }
        })
        .collect()
}

/// Lateral index range `xi` for which `xi + off` stays inside `0..nx`;
/// `None` when the shifted row misses the map entirely.
#[inline]
fn overlap(nx: usize, off: isize) -> Option<std::ops::Range<usize>> {
    let lo = (-off).max(0);
    let hi = (nx as isize - off).min(nx as isize);
    (lo < hi).then_some(lo as usize..hi as usize)
}

/// Delays predicted by one kernel: valid correlation of the padded map with
/// the kernel, output `nz × nx`.
pub fn forward_convolve(kernel: &Array2<f64>, map: &Array2<f64>) -> Result<Array2<f64>> {
    let dims = KernelDims::of(&kernel.view())?;
    let (nz, nx) = map.dim();
    let support = row_support(&kernel.view());
    let (kz, c) = (dims.kz, dims.anchor_col() as isize);
    let mut out = Array2::zeros((nz, nx));
    let buf = out.as_slice_mut().expect("standard layout");
    parallel::for_each_chunk_mut(buf, nx, |zi, out_row| {
        let a_lo = (kz - 1).saturating_sub(zi);
        for a in a_lo..kz {
            let zs = zi + a + 1 - kz;
            let src = map.row(zs);
            let src = src.as_slice().expect("standard layout");
            for b in support[a].clone() {
                let k = kernel[[a, b]];
                if k == 0.0 {
                    continue;
                }
                let off = b as isize - c;
                let Some(r) = overlap(nx, off) else { continue };
                let s0 = (r.start as isize + off) as usize;
                for (o, s) in out_row[r.clone()].iter_mut().zip(&src[s0..s0 + r.len()]) {
                    *o += k * s;
                }
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`forward_convolve`] with respect to the map: spreads the
/// per-point residual back over the slowness grid (`Lᵀ r` for one pair).
pub fn backproject(kernel: &Array2<f64>, residual: &Array2<f64>) -> Result<Array2<f64>> {
    let dims = KernelDims::of(&kernel.view())?;
    let (nz, nx) = residual.dim();
    let support = row_support(&kernel.view());
    let (kz, c) = (dims.kz, dims.anchor_col() as isize);
    let mut out = Array2::zeros((nz, nx));
    let buf = out.as_slice_mut().expect("standard layout");
    parallel::for_each_chunk_mut(buf, nx, |zs, out_row| {
        // Output row zs collects from points zi = zs + (kz - 1 - a) for a < kz.
        let zi_hi = (zs + kz).min(nz);
        for zi in zs..zi_hi {
            let a = zs + kz - 1 - zi;
            let src = residual.row(zi);
            let src = src.as_slice().expect("standard layout");
            for b in support[a].clone() {
                let k = kernel[[a, b]];
                if k == 0.0 {
                    continue;
                }
                // out[xs] += k * r[xs - off]
                let off = b as isize - c;
                let Some(r) = overlap(nx, -off) else { continue };
                let s0 = (r.start as isize - off) as usize;
                for (o, s) in out_row[r.clone()].iter_mut().zip(&src[s0..s0 + r.len()]) {
                    *o += k * s;
                }
            }
        }
    });
    Ok(out)
}

/// Adjoint with respect to the kernel: `Sᵀ r`, a `kz × kx` image.
pub fn correlate_residual(map: &Array2<f64>, dims: KernelDims, residual: &Array2<f64>) -> Result<Array2<f64>> {
    if map.dim() != residual.dim() {
        return Err(Error::Shape(format!(
            "map {:?} vs residual {:?}",
            map.dim(),
            residual.dim()
        )));
    }
    let (nz, nx) = map.dim();
    let (kz, c) = (dims.kz, dims.anchor_col() as isize);
    let rows: Vec<Vec<f64>> = parallel::map_range(kz, |a| {
        let mut row = vec![0.0; dims.kx];
        for (b, acc) in row.iter_mut().enumerate() {
            let off = b as isize - c;
            let Some(r) = overlap(nx, off) else { continue };
            let s0 = (r.start as isize + off) as usize;
            let mut sum = 0.0;
            for zi in (kz - 1).saturating_sub(a)..nz {
                let zs = zi + a + 1 - kz;
                let res = residual.row(zi);
                let res = &res.as_slice().expect("standard layout")[r.clone()];
                let src = map.row(zs);
                let src = &src.as_slice().expect("standard layout")[s0..s0 + r.len()];
                sum += res.iter().zip(src).map(|(x, y)| x * y).sum::<f64>();
            }
            *acc = sum;
        }
        row
    });
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((kz, dims.kx), flat).expect("shape"))
}

/// Dense Toeplitz-structured `S` with `S · vec(kernel) = vec(forward_convolve(kernel, map))`.
/// Rows are output points (row-major), columns kernel elements (row-major).
pub fn build_slowness_toeplitz(map: &Array2<f64>, dims: KernelDims) -> DMatrix<f64> {
    let (nz, nx) = map.dim();
    let padded = pad_slowness(map, dims);
    let mut s = DMatrix::zeros(nz * nx, dims.len());
    for zi in 0..nz {
        for xi in 0..nx {
            let r = zi * nx + xi;
            for a in 0..dims.kz {
                for b in 0..dims.kx {
                    s[(r, a * dims.kx + b)] = padded.values[[zi + a, xi + b]];
                }
            }
        }
    }
    s
}

/// Per-pair delay image with an optional validity mask (`true` = usable).
#[derive(Debug, Clone, PartialEq)]
pub struct DelayField {
    pub values: Array2<f64>,
    pub mask: Option<Array2<bool>>,
}

impl DelayField {
    pub fn new(values: Array2<f64>) -> Self {
        Self { values, mask: None }
    }

    pub fn with_mask(values: Array2<f64>, mask: Array2<bool>) -> Result<Self> {
        if mask.dim() != values.dim() {
            return Err(Error::Shape(format!(
                "mask {:?} vs delays {:?}",
                mask.dim(),
                values.dim()
            )));
        }
        Ok(Self {
            values,
            mask: Some(mask),
        })
    }

    pub fn is_valid(&self, z: usize, x: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[[z, x]])
    }

    pub fn valid_count(&self) -> usize {
        match &self.mask {
            None => self.values.len(),
            Some(m) => m.iter().filter(|&&v| v).count(),
        }
    }

    /// Mask as 0/1 weights.
    pub fn weights(&self) -> Array2<f64> {
        match &self.mask {
            None => Array2::ones(self.values.raw_dim()),
            Some(m) => m.mapv(|v| if v { 1.0 } else { 0.0 }),
        }
    }
}

/// One kernel per steering pair of a schedule, all on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel {
    pub kernels: Vec<Kernel>,
    pub grid: ImagingGrid,
}

impl ForwardModel {
    pub fn new(grid: ImagingGrid, kernels: Vec<Kernel>) -> Result<Self> {
        let first = kernels
            .first()
            .ok_or_else(|| Error::Parameter("forward model needs at least one kernel".into()))?
            .dims();
        if first.kz != grid.nz {
            return Err(Error::Shape(format!(
                "kernel height {} must equal grid depth {}",
                first.kz, grid.nz
            )));
        }
        if let Some(k) = kernels.iter().find(|k| k.dims() != first) {
            return Err(Error::Shape(format!(
                "kernel for {} is {:?}, expected {:?}",
                k.pair,
                k.dims(),
                first
            )));
        }
        Ok(Self { kernels, grid })
    }

    pub fn dims(&self) -> KernelDims {
        self.kernels[0].dims()
    }

    pub fn pairs(&self) -> Vec<SteeringPair> {
        self.kernels.iter().map(|k| k.pair).collect()
    }

    pub fn schedule(&self) -> Result<PairSchedule> {
        PairSchedule::new(self.pairs())
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Delay images for every pair, in schedule order.
    pub fn apply(&self, map: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        self.grid.check_shape("slowness map", map.shape())?;
        parallel::try_map(&self.kernels, |k| forward_convolve(&k.values, map))
    }

    /// `Σ_p L_pᵀ r_p`.
    pub fn adjoint(&self, residuals: &[Array2<f64>]) -> Result<Array2<f64>> {
        if residuals.len() != self.kernels.len() {
            return Err(Error::Shape(format!(
                "{} residual fields for {} pairs",
                residuals.len(),
                self.kernels.len()
            )));
        }
        let parts = parallel::try_map(&self.kernels.iter().zip(residuals).collect::<Vec<_>>(), |(k, r)| {
            backproject(&k.values, r)
        })?;
        let mut acc = self.grid.zeros();
        for p in parts {
            acc += &p;
        }
        Ok(acc)
    }

    /// Explicit sparse rows of the stacked matrix `L`: row `p·N + z·nx + x`,
    /// columns indexing the slowness grid row-major.
    pub fn assemble_rows(&self) -> SparseRows {
        let (nz, nx) = self.grid.shape();
        let d = self.dims();
        let c = d.anchor_col() as isize;
        let mut rows = Vec::with_capacity(self.len() * nz * nx);
        for k in &self.kernels {
            for zi in 0..nz {
                for xi in 0..nx {
                    let mut row = Vec::new();
                    for a in (d.kz - 1).saturating_sub(zi)..d.kz {
                        let zs = zi + a + 1 - d.kz;
                        for b in 0..d.kx {
                            let v = k.values[[a, b]];
                            let xs = xi as isize + b as isize - c;
                            if v != 0.0 && (0..nx as isize).contains(&xs) {
                                row.push((zs * nx + xs as usize, v));
                            }
                        }
                    }
                    rows.push(row);
                }
            }
        }
        SparseRows {
            rows,
            ncols: nz * nx,
        }
    }
}

pub fn apply_model(model: &ForwardModel, map: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
    model.apply(map)
}

/// Row-compressed sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub ncols: usize,
}

impl SparseRows {
    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn tmatvec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (r, &w) in self.rows.iter().zip(y) {
            for &(j, v) in r {
                out[j] += v * w;
            }
        }
        out
    }

    /// Dense `AᵀA`.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.ncols, self.ncols);
        for r in &self.rows {
            for &(i, a) in r {
                for &(j, b) in r {
                    m[(i, j)] += a * b;
                }
            }
        }
        m
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                m[(i, j)] += v;
            }
        }
        m
    }
}

/// Hand-crafted path model used to build kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PathModel {
    Line,
    Window(WindowConfig),
}

impl PathModel {
    /// Lateral margin the kernel needs beyond the bare rays.
    pub fn margin_cells(&self, grid: &ImagingGrid) -> usize {
        match self {
            PathModel::Line => 0,
            PathModel::Window(cfg) => cfg.max_reach_cells(grid),
        }
    }
}

/// Packages a hand-crafted path model as a kernel: the path image of the
/// kernel grid's mid-bottom cell center.
pub fn kernel_from_path_model(
    grid: &ImagingGrid,
    pair: SteeringPair,
    builder: &PathModel,
    dims: KernelDims,
) -> Result<Kernel> {
    let kgrid = dims.kernel_grid(grid);
    let anchor = kgrid.cell_center(dims.anchor_col(), dims.kz - 1);
    let img = match builder {
        PathModel::Line => trace_line_path(&kgrid, pair, anchor)?,
        PathModel::Window(cfg) => trace_window_path(&kgrid, pair, anchor, cfg)?,
    };
    Kernel::new(img.values, pair)
}

/// Full forward model from a hand-crafted path model, kernel sized for the
/// schedule.
pub fn hand_crafted_model(grid: &ImagingGrid, schedule: &PairSchedule, builder: &PathModel) -> Result<ForwardModel> {
    let dims = KernelDims::for_schedule(grid, schedule, builder.margin_cells(grid));
    let kernels = schedule
        .pairs()
        .iter()
        .map(|&p| kernel_from_path_model(grid, p, builder, dims))
        .collect::<Result<Vec<_>>>()?;
    ForwardModel::new(*grid, kernels)
}
