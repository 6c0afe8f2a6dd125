//! Regularized SoS inversion: `min_s ‖L s − t‖₁ + λ ‖D s‖₁` over the valid
//! measurements of every pair, with `D` the weighted first-difference
//! (total-variation) operator.
//!
//! The L1 terms are smoothed to `√(u² + ε²)` and minimized by iteratively
//! reweighted least squares. Each reweighted quadratic majorizes the smoothed
//! objective at the current iterate, and its inner solver (direct or
//! warm-started conjugate gradients) only ever lowers that quadratic, so the
//! smoothed objective cannot increase; `ε` shrinks on a schedule, which can
//! only lower it further. Internally the problem runs in normalized units
//! (delays over their median magnitude, path lengths over the cell width).

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::conv::{backproject, forward_convolve, DelayField, ForwardModel, SparseRows};
use crate::error::{Error, Result};
use crate::geometry::ImagingGrid;
use crate::linalg::{pcg, SpdFactor};
use crate::parallel;

/// Unknown count up to which each reweighted system is factored directly.
const DIRECT_MAX_UNKNOWNS: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamformingConfig {
    /// Assumed uniform SoS, m/s.
    pub c0: f64,
}

impl Default for BeamformingConfig {
    fn default() -> Self {
        Self { c0: 1500.0 }
    }
}

impl BeamformingConfig {
    pub fn new(c0: f64) -> Result<Self> {
        let cfg = Self { c0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c0.is_finite() && self.c0 > 0.0) {
            return Err(Error::Parameter(format!("c0 must be positive, got {}", self.c0)));
        }
        Ok(())
    }

    /// `σ0 = 1 / c0`, s/m.
    pub fn sigma0(&self) -> f64 {
        1.0 / self.c0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    /// TV weight in meters (data term is in seconds, `‖D s‖₁` in s/m).
    pub lambda: f64,
    /// Lateral difference weight relative to axial.
    pub kappa: f64,
    pub max_iters: usize,
    /// Relative objective change treated as stagnation.
    pub tolerance: f64,
    /// Initial smoothing, relative to the median delay magnitude. Starting
    /// coarse and halving keeps IRLS from freezing residuals at zero early.
    pub epsilon: f64,
    /// Smallest relative smoothing reached by halving.
    pub epsilon_floor: f64,
    /// Iterations between forced halvings of `ε`.
    pub epsilon_halving_period: usize,
    pub cg_max_iters: usize,
    pub cg_tolerance: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-4,
            kappa: 1.0,
            max_iters: 40,
            tolerance: 1e-6,
            epsilon: 1e-1,
            epsilon_floor: 1e-8,
            epsilon_halving_period: 10,
            cg_max_iters: 25,
            cg_tolerance: 1e-8,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [("lambda", self.lambda), ("tolerance", self.tolerance), ("cg_tolerance", self.cg_tolerance)];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let positive = [("kappa", self.kappa), ("epsilon", self.epsilon), ("epsilon_floor", self.epsilon_floor)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.epsilon_floor > self.epsilon {
            return Err(Error::Parameter("epsilon_floor must not exceed epsilon".into()));
        }
        for (name, v) in [
            ("max_iters", self.max_iters),
            ("epsilon_halving_period", self.epsilon_halving_period),
            ("cg_max_iters", self.cg_max_iters),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    /// Relative slowness `s = σ − σ0`, s/m.
    pub slowness: Array2<f64>,
    /// `1 / (s + σ0)`, m/s.
    pub sos: Array2<f64>,
    /// Smoothed objective after each iteration (first entry: start), in
    /// the objective's own units.
    pub objective_trace: Vec<f64>,
    /// Unsmoothed objective of the returned slowness.
    pub l1_objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn displacements_to_delays(displacements: &DelayField, c0: f64) -> Result<DelayField> {
    BeamformingConfig::new(c0)?;
    Ok(DelayField {
        values: displacements.values.mapv(|d| d / c0),
        mask: displacements.mask.clone(),
    })
}

pub fn delays_to_displacements(delays: &DelayField, c0: f64) -> Result<DelayField> {
    BeamformingConfig::new(c0)?;
    Ok(DelayField {
        values: delays.values.mapv(|t| t * c0),
        mask: delays.mask.clone(),
    })
}

/// `s = 1/c − σ0`.
pub fn sos_to_slowness(sos: &Array2<f64>, bf: &BeamformingConfig) -> Result<Array2<f64>> {
    bf.validate()?;
    if let Some(c) = sos.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(Error::Domain(format!("SoS values must be positive and finite, got {c}")));
    }
    let sigma0 = bf.sigma0();
    Ok(sos.mapv(|c| 1.0 / c - sigma0))
}

/// `c = 1/(s + σ0)`.
pub fn slowness_to_sos(slowness: &Array2<f64>, bf: &BeamformingConfig) -> Result<Array2<f64>> {
    bf.validate()?;
    let sigma0 = bf.sigma0();
    if let Some(s) = slowness.iter().find(|s| !(s.is_finite() && **s + sigma0 > 0.0)) {
        return Err(Error::Domain(format!("slowness {s} gives a non-positive absolute slowness")));
    }
    Ok(slowness.mapv(|s| 1.0 / (s + sigma0)))
}

/// First differences over the slowness grid with free boundaries: axial
/// `s[z+1, x] − s[z, x]` (weight 1) then lateral `κ (s[z, x+1] − s[z, x])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvOperator {
    pub nz: usize,
    pub nx: usize,
    pub kappa: f64,
}

pub fn build_tv_operator(grid: &ImagingGrid, kappa: f64) -> Result<TvOperator> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::Parameter(format!("kappa must be positive, got {kappa}")));
    }
    Ok(TvOperator {
        nz: grid.nz,
        nx: grid.nx,
        kappa,
    })
}

impl TvOperator {
    pub fn n_axial(&self) -> usize {
        (self.nz - 1) * self.nx
    }

    pub fn n_rows(&self) -> usize {
        self.n_axial() + self.nz * (self.nx - 1)
    }

    /// `D s`, axial block then lateral block, each row-major.
    pub fn apply(&self, s: &Array2<f64>) -> Vec<f64> {
        let (nz, nx, k) = (self.nz, self.nx, self.kappa);
        let mut out = Vec::with_capacity(self.n_rows());
        for z in 0..nz - 1 {
            for x in 0..nx {
                out.push(s[[z + 1, x]] - s[[z, x]]);
            }
        }
        for z in 0..nz {
            for x in 0..nx - 1 {
                out.push(k * (s[[z, x + 1]] - s[[z, x]]));
            }
        }
        out
    }

    /// `Dᵀ u`.
    pub fn adjoint(&self, u: &[f64]) -> Array2<f64> {
        let (nz, nx, k) = (self.nz, self.nx, self.kappa);
        let mut out = Array2::zeros((nz, nx));
        let (ax, lat) = u.split_at(self.n_axial());
        for z in 0..nz - 1 {
            for x in 0..nx {
                let v = ax[z * nx + x];
                out[[z + 1, x]] += v;
                out[[z, x]] -= v;
            }
        }
        for z in 0..nz {
            for x in 0..nx - 1 {
                let v = k * lat[z * (nx - 1) + x];
                out[[z, x + 1]] += v;
                out[[z, x]] -= v;
            }
        }
        out
    }

    /// `diag(Dᵀ V D)` for row weights `v`.
    fn weighted_diag(&self, v: &[f64]) -> Array2<f64> {
        let (nz, nx, k2) = (self.nz, self.nx, self.kappa * self.kappa);
        let mut out = Array2::zeros((nz, nx));
        let (ax, lat) = v.split_at(self.n_axial());
        for z in 0..nz - 1 {
            for x in 0..nx {
                out[[z + 1, x]] += ax[z * nx + x];
                out[[z, x]] += ax[z * nx + x];
            }
        }
        for z in 0..nz {
            for x in 0..nx - 1 {
                out[[z, x + 1]] += k2 * lat[z * (nx - 1) + x];
                out[[z, x]] += k2 * lat[z * (nx - 1) + x];
            }
        }
        out
    }

    pub fn l1(&self, s: &Array2<f64>) -> f64 {
        self.apply(s).iter().map(|v| v.abs()).sum()
    }

    pub fn to_sparse_rows(&self) -> SparseRows {
        let (nz, nx, k) = (self.nz, self.nx, self.kappa);
        let mut rows = Vec::with_capacity(self.n_rows());
        for z in 0..nz - 1 {
            for x in 0..nx {
                rows.push(vec![(z * nx + x, -1.0), ((z + 1) * nx + x, 1.0)]);
            }
        }
        for z in 0..nz {
            for x in 0..nx - 1 {
                rows.push(vec![(z * nx + x, -k), (z * nx + x + 1, k)]);
            }
        }
        SparseRows { rows, ncols: nz * nx }
    }
}

/// Marks invalid the top `near_field_rows` rows, `edge_cols` columns on each
/// side, and every entry where `confidence` is false.
pub fn apply_measurement_mask(
    delays: &DelayField,
    near_field_rows: usize,
    edge_cols: usize,
    confidence: Option<&Array2<bool>>,
) -> Result<DelayField> {
    let (nz, nx) = delays.values.dim();
    if near_field_rows > nz || 2 * edge_cols > nx {
        return Err(Error::Parameter(format!(
            "margins ({near_field_rows} rows, {edge_cols} columns per side) exceed the {nz}x{nx} field"
        )));
    }
    if let Some(c) = confidence {
        if c.dim() != (nz, nx) {
            return Err(Error::Shape(format!("confidence mask {:?} vs delays {:?}", c.dim(), (nz, nx))));
        }
    }
    let mask = Array2::from_shape_fn((nz, nx), |(z, x)| {
        delays.is_valid(z, x)
            && z >= near_field_rows
            && x >= edge_cols
            && x < nx - edge_cols
            && confidence.is_none_or(|c| c[[z, x]])
    });
    DelayField::with_mask(delays.values.clone(), mask)
}

fn check_inputs(model: &ForwardModel, delays: &[DelayField]) -> Result<()> {
    if delays.len() != model.len() {
        return Err(Error::Shape(format!(
            "{} delay fields for a model with {} pairs",
            delays.len(),
            model.len()
        )));
    }
    for (d, k) in delays.iter().zip(&model.kernels) {
        model
            .grid
            .check_shape(&format!("delays for pair {}", k.pair), d.values.shape())?;
        if d.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("delays for pair {} contain non-finite values", k.pair)));
        }
    }
    if delays.iter().all(|d| d.valid_count() == 0) {
        return Err(Error::Data("no valid delay measurements".into()));
    }
    Ok(())
}

/// Exact objective `Σ |L s − t| + λ ‖D s‖₁` over valid measurements.
pub fn l1_objective(model: &ForwardModel, delays: &[DelayField], slowness: &Array2<f64>, lambda: f64, kappa: f64) -> Result<f64> {
    check_inputs(model, delays)?;
    let pred = model.apply(slowness)?;
    let mut data = 0.0;
    for (p, d) in pred.iter().zip(delays) {
        for ((z, x), v) in p.indexed_iter() {
            if d.is_valid(z, x) {
                data += (v - d.values[[z, x]]).abs();
            }
        }
    }
    let tv = build_tv_operator(&model.grid, kappa)?;
    Ok(data + lambda * tv.l1(slowness))
}

/// Normalized problem: `L̂ = L / ℓ`, `t̂ = t / t_scale`, `ŝ = s ℓ / t_scale`.
struct Scaled {
    kernels: Vec<Array2<f64>>,
    kernels_sq: Vec<Array2<f64>>,
    targets: Vec<Array2<f64>>,
    masks: Vec<Array2<f64>>,
    tv: TvOperator,
    lambda: f64,
}

impl Scaled {
    fn predict(&self, s: &Array2<f64>) -> Vec<Array2<f64>> {
        parallel::map(&self.kernels, |k| forward_convolve(k, s).expect("validated shapes"))
    }

    fn residuals(&self, s: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut pred = self.predict(s);
        for ((p, t), m) in pred.iter_mut().zip(&self.targets).zip(&self.masks) {
            Zip::from(p).and(t).and(m).for_each(|p, &t, &m| *p = m * (*p - t));
        }
        pred
    }

    /// Smoothed objective; masked entries contribute nothing.
    fn smoothed(&self, s: &Array2<f64>, eps: f64) -> f64 {
        let e2 = eps * eps;
        let r = self.residuals(s);
        let mut data = 0.0;
        for (r, m) in r.iter().zip(&self.masks) {
            data += Zip::from(r)
                .and(m)
                .fold(0.0, |acc, &r, &m| if m > 0.0 { acc + (r * r + e2).sqrt() } else { acc });
        }
        let tv: f64 = self.tv.apply(s).iter().map(|u| (u * u + e2).sqrt()).sum();
        data + self.lambda * tv
    }

    fn exact(&self, s: &Array2<f64>) -> f64 {
        let data: f64 = self.residuals(s).iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).sum();
        data + self.lambda * self.tv.l1(s)
    }

    /// `L̂ᵀ W L̂ x + λ Dᵀ V D x`.
    fn apply_normal(&self, w: &[Array2<f64>], v: &[f64], x: &Array2<f64>) -> Array2<f64> {
        let parts = parallel::map_range(self.kernels.len(), |p| {
            let mut y = forward_convolve(&self.kernels[p], x).expect("validated shapes");
            y *= &w[p];
            backproject(&self.kernels[p], &y).expect("validated shapes")
        });
        let mut out = Array2::zeros(x.raw_dim());
        for p in parts {
            out += &p;
        }
        if self.lambda > 0.0 {
            let mut u = self.tv.apply(x);
            u.iter_mut().zip(v).for_each(|(u, v)| *u *= v);
            out.scaled_add(self.lambda, &self.tv.adjoint(&u));
        }
        out
    }

    fn weights(&self, s: &Array2<f64>, eps: f64) -> (Vec<Array2<f64>>, Vec<f64>) {
        let e2 = eps * eps;
        let w = self
            .residuals(s)
            .into_iter()
            .zip(&self.masks)
            .map(|(r, m)| Zip::from(&r).and(m).map_collect(|&r, &m| m / (r * r + e2).sqrt()))
            .collect();
        let v = self.tv.apply(s).iter().map(|u| 1.0 / (u * u + e2).sqrt()).collect();
        (w, v)
    }

    fn rhs(&self, w: &[Array2<f64>]) -> Array2<f64> {
        let parts = parallel::map_range(self.kernels.len(), |p| {
            backproject(&self.kernels[p], &(&w[p] * &self.targets[p])).expect("validated shapes")
        });
        let mut out = Array2::zeros((self.tv.nz, self.tv.nx));
        for p in parts {
            out += &p;
        }
        out
    }

    fn diag(&self, w: &[Array2<f64>], v: &[f64]) -> Array2<f64> {
        let parts = parallel::map_range(self.kernels.len(), |p| {
            backproject(&self.kernels_sq[p], &w[p]).expect("validated shapes")
        });
        let mut out = Array2::zeros((self.tv.nz, self.tv.nx));
        for p in parts {
            out += &p;
        }
        if self.lambda > 0.0 {
            out.scaled_add(self.lambda, &self.tv.weighted_diag(v));
        }
        out
    }
}

/// Dense rows of the scaled stacked operator, built once for small grids.
struct DenseRows {
    l: SparseRows,
    d: SparseRows,
}

impl DenseRows {
    fn solve(&self, sc: &Scaled, w: &[Array2<f64>], v: &[f64], rhs: &Array2<f64>) -> Option<Array2<f64>> {
        let n = self.l.ncols;
        let wflat: Vec<f64> = w.iter().flat_map(|w| w.iter().copied()).collect();
        let mut a = DMatrix::zeros(n, n);
        for (row, &wi) in self.l.rows.iter().zip(&wflat) {
            if wi == 0.0 {
                continue;
            }
            for &(i, vi) in row {
                for &(j, vj) in row {
                    a[(i, j)] += wi * vi * vj;
                }
            }
        }
        for (row, &vi) in self.d.rows.iter().zip(v) {
            for &(i, a1) in row {
                for &(j, a2) in row {
                    a[(i, j)] += sc.lambda * vi * a1 * a2;
                }
            }
        }
        let factor = SpdFactor::new(&a, true).ok()?;
        let x = factor.solve(&DVector::from_iterator(n, rhs.iter().copied()));
        Array2::from_shape_vec(rhs.raw_dim(), x.as_slice().to_vec()).ok()
    }
}

fn median_abs(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Smoothed-L1 IRLS reconstruction from per-pair delays (masks included in
/// each [`DelayField`]). Starts from zero slowness.
pub fn reconstruct(
    model: &ForwardModel,
    delays: &[DelayField],
    bf: &BeamformingConfig,
    cfg: &InversionConfig,
) -> Result<ReconResult> {
    bf.validate()?;
    cfg.validate()?;
    check_inputs(model, delays)?;
    let grid = model.grid;
    let tv = build_tv_operator(&grid, cfg.kappa)?;

    let mut mags: Vec<f64> = delays
        .iter()
        .flat_map(|d| d.values.indexed_iter().filter(|((z, x), _)| d.is_valid(*z, *x)).map(|(_, v)| v.abs()))
        .collect();
    let max_abs = mags.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut t_scale = median_abs(&mut mags);
    if t_scale == 0.0 {
        t_scale = max_abs;
    }
    let zero = grid.zeros();
    if t_scale == 0.0 {
        return Ok(ReconResult {
            sos: slowness_to_sos(&zero, bf)?,
            slowness: zero,
            objective_trace: vec![0.0],
            l1_objective: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    let ell = grid.dx();
    let kernels: Vec<Array2<f64>> = model.kernels.iter().map(|k| &k.values / ell).collect();
    let sc = Scaled {
        kernels_sq: kernels.iter().map(|k| k.mapv(|v| v * v)).collect(),
        kernels,
        targets: delays
            .iter()
            .map(|d| Zip::from(&d.values).and(&d.weights()).map_collect(|&t, &m| m * t / t_scale))
            .collect(),
        masks: delays.iter().map(|d| d.weights()).collect(),
        tv,
        lambda: cfg.lambda / ell,
    };
    let dense = (grid.len() <= DIRECT_MAX_UNKNOWNS).then(|| {
        let scaled_model = ForwardModel {
            kernels: model
                .kernels
                .iter()
                .zip(&sc.kernels)
                .map(|(k, v)| crate::conv::Kernel {
                    values: v.clone(),
                    pair: k.pair,
                })
                .collect(),
            grid,
        };
        DenseRows {
            l: scaled_model.assemble_rows(),
            d: tv.to_sparse_rows(),
        }
    });

    let mut eps = cfg.epsilon;
    let mut s = zero;
    let mut phi = sc.smoothed(&s, eps);
    let mut trace = vec![phi * t_scale];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        iterations = it;
        let (w, v) = sc.weights(&s, eps);
        let rhs = sc.rhs(&w);
        let direct = dense.as_ref().and_then(|d| d.solve(&sc, &w, &v, &rhs));
        let candidate = match direct {
            Some(x) => x,
            None => {
                let inv_diag: Vec<f64> = sc
                    .diag(&w, &v)
                    .iter()
                    .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
                    .collect();
                let mut x: Vec<f64> = s.iter().copied().collect();
                let shape = s.raw_dim();
                pcg(
                    |y| {
                        let y = Array2::from_shape_vec(shape, y.to_vec()).expect("shape");
                        sc.apply_normal(&w, &v, &y).into_raw_vec_and_offset().0
                    },
                    rhs.as_slice().expect("standard layout"),
                    &inv_diag,
                    &mut x,
                    cfg.cg_max_iters,
                    cfg.cg_tolerance,
                );
                Array2::from_shape_vec(shape, x).expect("shape")
            }
        };
        let phi_new = sc.smoothed(&candidate, eps);
        let prev = phi;
        if phi_new.is_finite() && phi_new <= phi {
            s = candidate;
            phi = phi_new;
        }
        let rel = (prev - phi) / prev.max(f64::MIN_POSITIVE);
        let stalled = rel < cfg.tolerance;
        if eps > cfg.epsilon_floor && (stalled || it % cfg.epsilon_halving_period == 0) {
            eps = (eps * 0.5).max(cfg.epsilon_floor);
            phi = sc.smoothed(&s, eps).min(phi);
        } else if stalled {
            trace.push(phi * t_scale);
            converged = true;
            break;
        }
        trace.push(phi * t_scale);
    }

    let l1 = sc.exact(&s) * t_scale;
    let slowness = s * (t_scale / ell);
    Ok(ReconResult {
        sos: slowness_to_sos(&slowness, bf)?,
        slowness,
        objective_trace: trace,
        l1_objective: l1,
        iterations,
        converged,
    })
}
