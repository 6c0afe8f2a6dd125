//! Imaging grid, steering-pair schedule and the hand-crafted path models.
//!
//! Coordinates are in meters: `x` is lateral (0 at the left aperture edge),
//! `z` is depth (0 on the transducer surface). Images are stored as
//! `nz × nx` arrays indexed `[z, x]`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagingGrid {
    pub width_m: f64,
    pub depth_m: f64,
    pub nx: usize,
    pub nz: usize,
}

impl ImagingGrid {
    pub fn new(width_m: f64, depth_m: f64, nx: usize, nz: usize) -> Result<Self> {
        if nx < 2 || nz < 2 {
            return Err(Error::Parameter(format!(
                "grid needs at least 2x2 cells, got nx={nx} nz={nz}"
            )));
        }
        if !(width_m.is_finite() && width_m > 0.0 && depth_m.is_finite() && depth_m > 0.0) {
            return Err(Error::Parameter(format!(
                "grid extents must be positive, got {width_m} x {depth_m} m"
            )));
        }
        Ok(Self {
            width_m,
            depth_m,
            nx,
            nz,
        })
    }

    /// 32 × 44 cells over 40 × 55 mm.
    pub fn desk() -> Self {
        Self {
            width_m: 0.040,
            depth_m: 0.055,
            nx: 32,
            nz: 44,
        }
    }

    /// 64 × 88 cells over 40 × 55 mm.
    pub fn full() -> Self {
        Self {
            width_m: 0.040,
            depth_m: 0.055,
            nx: 64,
            nz: 88,
        }
    }

    pub fn dx(&self) -> f64 {
        self.width_m / self.nx as f64
    }

    pub fn dz(&self) -> f64 {
        self.depth_m / self.nz as f64
    }

    pub fn len(&self) -> usize {
        self.nx * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nz, self.nx)
    }

    pub fn zeros(&self) -> Array2<f64> {
        Array2::zeros((self.nz, self.nx))
    }

    pub fn cell_center(&self, ix: usize, iz: usize) -> Point {
        Point {
            x: (ix as f64 + 0.5) * self.dx(),
            z: (iz as f64 + 0.5) * self.dz(),
        }
    }

    /// Closed-box containment.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= 0.0 && p.x <= self.width_m && p.z >= 0.0 && p.z <= self.depth_m
    }

    /// Same spacing, different cell counts.
    pub fn with_cells(&self, nx: usize, nz: usize) -> Self {
        Self {
            width_m: self.dx() * nx as f64,
            depth_m: self.dz() * nz as f64,
            nx,
            nz,
        }
    }

    /// Checks an image has this grid's shape.
    pub fn check_shape(&self, what: &str, shape: &[usize]) -> Result<()> {
        if shape != [self.nz, self.nx] {
            return Err(Error::Shape(format!(
                "{what} is {shape:?}, grid expects [{}, {}]",
                self.nz, self.nx
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub z: f64,
}

impl Point {
    pub fn new(x: f64, z: f64) -> Self {
        Self { x, z }
    }
}

/// Plane-wave steering angles of a frame pair, in degrees. Positive angles
/// tilt the wavefront propagation toward +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringPair {
    pub theta1_deg: f64,
    pub theta2_deg: f64,
}

impl SteeringPair {
    pub fn new(theta1_deg: f64, theta2_deg: f64) -> Result<Self> {
        for t in [theta1_deg, theta2_deg] {
            if !t.is_finite() || t.abs() >= 90.0 {
                return Err(Error::Parameter(format!(
                    "steering angle {t} deg outside (-90, 90)"
                )));
            }
        }
        if theta1_deg == theta2_deg {
            return Err(Error::Parameter(format!(
                "steering pair needs two distinct angles, got {theta1_deg} twice"
            )));
        }
        Ok(Self {
            theta1_deg,
            theta2_deg,
        })
    }

    pub fn max_abs_deg(&self) -> f64 {
        self.theta1_deg.abs().max(self.theta2_deg.abs())
    }

    /// Lateral mirror image `(-θ1, -θ2)`.
    pub fn mirrored(&self) -> Self {
        Self {
            theta1_deg: -self.theta1_deg,
            theta2_deg: -self.theta2_deg,
        }
    }
}

impl std::fmt::Display for SteeringPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}°, {}°)", self.theta1_deg, self.theta2_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSchedule {
    pairs: Vec<SteeringPair>,
}

impl PairSchedule {
    pub fn new(pairs: Vec<SteeringPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Parameter("schedule needs at least one pair".into()));
        }
        for (i, a) in pairs.iter().enumerate() {
            if pairs[..i].contains(a) {
                return Err(Error::Parameter(format!("duplicate steering pair {a}")));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[SteeringPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn max_abs_deg(&self) -> f64 {
        self.pairs
            .iter()
            .map(SteeringPair::max_abs_deg)
            .fold(0.0, f64::max)
    }
}

impl Default for PairSchedule {
    fn default() -> Self {
        make_default_schedule()
    }
}

/// Eight pairs with 4° disparity at 5° increments, (-20,-16) .. (15,19).
pub fn make_default_schedule() -> PairSchedule {
    let pairs = (0..8)
        .map(|i| {
            let t1 = -20.0 + 5.0 * i as f64;
            SteeringPair {
                theta1_deg: t1,
                theta2_deg: t1 + 4.0,
            }
        })
        .collect();
    PairSchedule { pairs }
}

/// Signed differential path image for one tracked point and steering pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PathImage {
    /// `nz × nx`, meters of path per cell.
    pub values: Array2<f64>,
    pub grid: ImagingGrid,
    pub pair: SteeringPair,
    pub point: Point,
}

/// Lateral Hann widening of the hand-crafted window model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub f_number: f64,
    /// Cap on the half-width, in cells.
    pub max_half_width_cells: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            f_number: 1.0,
            max_half_width_cells: 8.0,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_number.is_finite() && self.f_number > 0.0) {
            return Err(Error::Parameter(format!(
                "f-number must be positive, got {}",
                self.f_number
            )));
        }
        if !(self.max_half_width_cells.is_finite() && self.max_half_width_cells >= 0.0) {
            return Err(Error::Parameter(format!(
                "max half-width must be >= 0 cells, got {}",
                self.max_half_width_cells
            )));
        }
        Ok(())
    }

    /// Half-width in cells at depth `z`: `min(z / (2 f#), w_max)`.
    pub fn half_width_cells(&self, z: f64, dx: f64) -> f64 {
        (z / (2.0 * self.f_number) / dx).min(self.max_half_width_cells)
    }

    /// Normalized lateral taps for image row `row` of `grid`, centered.
    pub fn taps_for_row(&self, grid: &ImagingGrid, row: usize) -> Vec<f64> {
        let z = (row as f64 + 0.5) * grid.dz();
        hann_taps(self.half_width_cells(z, grid.dx()))
    }

    /// Largest tap offset this window can produce on `grid`.
    pub fn max_reach_cells(&self, grid: &ImagingGrid) -> usize {
        (0..grid.nz)
            .map(|r| (self.taps_for_row(grid, r).len() - 1) / 2)
            .max()
            .unwrap_or(0)
    }
}

/// Hann taps `0.5 (1 + cos(π k / w))` for integer `|k| < w`, normalized to
/// unit sum. A half-width of at most one cell gives the single tap `[1]`.
pub fn hann_taps(half_width_cells: f64) -> Vec<f64> {
    let w = half_width_cells;
    if !(w > 1.0) {
        return vec![1.0];
    }
    let reach = (w.ceil() as usize).saturating_sub(1);
    let raw: Vec<f64> = (-(reach as isize)..=reach as isize)
        .map(|k| 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / w).cos()))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Exact per-cell lengths of the segment `p0 → p1`, clipped to the grid box.
///
/// Amanatides–Woo traversal: the walk steps to whichever cell boundary the
/// segment reaches next, so each visited cell receives the exact length of
/// the piece inside it. `visit(iz, ix, length)` is called once per piece.
pub fn traverse_segment(grid: &ImagingGrid, p0: Point, p1: Point, mut visit: impl FnMut(usize, usize, f64)) {
    let (dx, dz) = (grid.dx(), grid.dz());
    let ddx = p1.x - p0.x;
    let ddz = p1.z - p0.z;
    let len = ddx.hypot(ddz);
    if len == 0.0 {
        return;
    }

    // Liang–Barsky clip against [0, W] × [0, D].
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [
        (-ddx, p0.x),
        (ddx, grid.width_m - p0.x),
        (-ddz, p0.z),
        (ddz, grid.depth_m - p0.z),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t1 <= t0 {
        return;
    }

    let start_x = p0.x + t0 * ddx;
    let start_z = p0.z + t0 * ddz;
    let first_cell = |coord: f64, step: f64, dir: f64, n: usize| -> isize {
        let f = coord / step;
        let i = if dir < 0.0 { f.ceil() - 1.0 } else { f.floor() };
        (i as isize).clamp(0, n as isize - 1)
    };
    let mut ix = first_cell(start_x, dx, ddx, grid.nx);
    let mut iz = first_cell(start_z, dz, ddz, grid.nz);

    let axis = |i: isize, d: f64, origin: f64, step: f64| -> (isize, f64, f64) {
        if d > 0.0 {
            let next = (i + 1) as f64 * step;
            (1, (next - origin) / d, step / d)
        } else if d < 0.0 {
            let next = i as f64 * step;
            (-1, (next - origin) / d, -step / d)
        } else {
            (0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (step_x, mut tmax_x, tdelta_x) = axis(ix, ddx, p0.x, dx);
    let (step_z, mut tmax_z, tdelta_z) = axis(iz, ddz, p0.z, dz);

    let mut t = t0;
    loop {
        let t_next = tmax_x.min(tmax_z).min(t1);
        if t_next > t {
            visit(iz as usize, ix as usize, (t_next - t) * len);
            t = t_next;
        }
        if t >= t1 {
            break;
        }
        if tmax_x < tmax_z {
            ix += step_x;
            tmax_x += tdelta_x;
        } else if tmax_z < tmax_x {
            iz += step_z;
            tmax_z += tdelta_z;
        } else {
            ix += step_x;
            iz += step_z;
            tmax_x += tdelta_x;
            tmax_z += tdelta_z;
        }
        if ix < 0 || iz < 0 || ix >= grid.nx as isize || iz >= grid.nz as isize {
            break;
        }
    }
}

/// Transmit leg for a plane wave steered at `theta_deg`: the straight
/// segment from the transducer plane `z = 0` to `point`.
pub fn tx_leg(grid: &ImagingGrid, theta_deg: f64, point: Point) -> Array2<f64> {
    let tan = theta_deg.to_radians().tan();
    let entry = Point::new(point.x - point.z * tan, 0.0);
    segment_image(grid, entry, point)
}

/// Receive leg: vertical segment from `point` back to the aperture center.
pub fn rx_leg(grid: &ImagingGrid, point: Point) -> Array2<f64> {
    segment_image(grid, point, Point::new(point.x, 0.0))
}

fn segment_image(grid: &ImagingGrid, p0: Point, p1: Point) -> Array2<f64> {
    let mut img = grid.zeros();
    traverse_segment(grid, p0, p1, |iz, ix, l| img[[iz, ix]] += l);
    img
}

/// The three unsigned legs of a differential path.
#[derive(Debug, Clone)]
pub struct PathLegs {
    pub tx1: Array2<f64>,
    pub tx2: Array2<f64>,
    pub rx: Array2<f64>,
}

impl PathLegs {
    pub fn trace(grid: &ImagingGrid, pair: SteeringPair, point: Point) -> Result<Self> {
        if !grid.contains(point) {
            return Err(Error::Domain(format!(
                "point ({:.6}, {:.6}) m outside the {:.6} x {:.6} m grid",
                point.x, point.z, grid.width_m, grid.depth_m
            )));
        }
        Ok(Self {
            tx1: tx_leg(grid, pair.theta1_deg, point),
            tx2: tx_leg(grid, pair.theta2_deg, point),
            rx: rx_leg(grid, point),
        })
    }

    /// `(tx1 + rx) − (tx2 + rx)`; the shared receive leg cancels exactly, so
    /// it is never added in the first place.
    pub fn differential(&self) -> Array2<f64> {
        &self.tx1 - &self.tx2
    }

    fn widen(&mut self, grid: &ImagingGrid, cfg: &WindowConfig) {
        for leg in [&mut self.tx1, &mut self.tx2, &mut self.rx] {
            *leg = widen_rows(leg, grid, cfg);
        }
    }
}

/// Line-model differential path: `+` for the θ1 round trip, `−` for θ2.
pub fn trace_line_path(grid: &ImagingGrid, pair: SteeringPair, point: Point) -> Result<PathImage> {
    let legs = PathLegs::trace(grid, pair, point)?;
    Ok(PathImage {
        values: legs.differential(),
        grid: *grid,
        pair,
        point,
    })
}

/// Window-model differential path: every depth row of every leg is spread
/// laterally by a Hann window whose half-width grows with depth.
pub fn trace_window_path(
    grid: &ImagingGrid,
    pair: SteeringPair,
    point: Point,
    cfg: &WindowConfig,
) -> Result<PathImage> {
    cfg.validate()?;
    let mut legs = PathLegs::trace(grid, pair, point)?;
    legs.widen(grid, cfg);
    Ok(PathImage {
        values: legs.differential(),
        grid: *grid,
        pair,
        point,
    })
}

/// Row-wise lateral convolution with the depth's Hann taps. Rows that lose
/// mass over the lateral grid edge are rescaled to keep their total.
fn widen_rows(leg: &Array2<f64>, grid: &ImagingGrid, cfg: &WindowConfig) -> Array2<f64> {
    let nx = grid.nx;
    let mut out = Array2::zeros(leg.raw_dim());
    for (r, row) in leg.outer_iter().enumerate() {
        let taps = cfg.taps_for_row(grid, r);
        if taps.len() == 1 {
            out.row_mut(r).assign(&row);
            continue;
        }
        let reach = (taps.len() - 1) / 2;
        let mut clipped = false;
        for (c, &v) in row.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (k, &w) in taps.iter().enumerate() {
                let dst = c as isize + k as isize - reach as isize;
                if dst < 0 || dst >= nx as isize {
                    clipped = true;
                    continue;
                }
                out[[r, dst as usize]] += w * v;
            }
        }
        if clipped {
            let want: f64 = row.sum();
            let got: f64 = out.row(r).sum();
            if got > 0.0 {
                out.row_mut(r).mapv_inplace(|v| v * want / got);
            }
        }
    }
    out
}
