//! Synthetic SoS phantoms and their delay observations.
//!
//! Phantoms are rasterized with supersampled coverage: a cell belongs to an
//! inclusion when at least half of it is covered, and its SoS blends the
//! inclusion and background values by coverage. Observations come from a
//! designated "truth" forward model plus Gaussian noise, so model mismatch
//! between learning and testing is fully controlled.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conv::{DelayField, ForwardModel};
use crate::error::{Error, Result};
use crate::geometry::ImagingGrid;
use crate::inversion::{sos_to_slowness, BeamformingConfig};

/// Every phantom SoS value lies in this band, m/s.
pub const SOS_SANITY_BAND: (f64, f64) = (1300.0, 1700.0);

const SUPERSAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomFamily {
    Blob,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundMode {
    Constant,
    Smooth,
    /// Constant or smooth, drawn per phantom.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InclusionShape {
    Blob,
    Circle,
    Rectangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub family: PhantomFamily,
    pub grid: ImagingGrid,
    pub background_mode: BackgroundMode,
    /// Uniform range of the background SoS, m/s.
    pub background_sos_range: (f64, f64),
    /// Peak deviation of a smooth background, m/s.
    pub smooth_amplitude: f64,
    /// Contrast magnitude is uniform in `[min_contrast, max_contrast]`, m/s,
    /// with a random sign.
    pub min_contrast: f64,
    pub max_contrast: f64,
    /// Width of the background ring around the inclusion, m.
    pub ring_width_m: f64,
    pub rng_seed: u64,
}

impl PhantomSpec {
    pub fn blob(grid: ImagingGrid, rng_seed: u64) -> Self {
        Self {
            family: PhantomFamily::Blob,
            grid,
            background_mode: BackgroundMode::Mixed,
            background_sos_range: (1470.0, 1550.0),
            smooth_amplitude: 5.0,
            min_contrast: 1.0,
            max_contrast: 10.0,
            ring_width_m: 5e-3,
            rng_seed,
        }
    }

    pub fn geometric(grid: ImagingGrid, rng_seed: u64) -> Self {
        Self {
            family: PhantomFamily::Geometric,
            max_contrast: 100.0,
            ..Self::blob(grid, rng_seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.background_sos_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo > 0.0) {
            return Err(Error::Parameter(format!("background_sos_range [{lo}, {hi}] is empty or invalid")));
        }
        if !(self.max_contrast.is_finite() && self.max_contrast > 0.0) {
            return Err(Error::Parameter(format!("max_contrast must be > 0, got {}", self.max_contrast)));
        }
        if !(self.min_contrast >= 0.0 && self.min_contrast <= self.max_contrast) {
            return Err(Error::Parameter(format!(
                "min_contrast must lie in [0, max_contrast], got {}",
                self.min_contrast
            )));
        }
        if !(self.smooth_amplitude.is_finite() && self.smooth_amplitude >= 0.0) {
            return Err(Error::Parameter("smooth_amplitude must be >= 0".into()));
        }
        if !(self.ring_width_m.is_finite() && self.ring_width_m > 0.0) {
            return Err(Error::Parameter("ring_width_m must be > 0".into()));
        }
        let (blo, bhi) = SOS_SANITY_BAND;
        if lo - self.max_contrast < blo || hi + self.max_contrast > bhi {
            return Err(Error::Parameter(format!(
                "background range and contrast leave the [{blo}, {bhi}] m/s band"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomMeta {
    pub family: PhantomFamily,
    pub shape: InclusionShape,
    pub seed: u64,
    /// Signed inclusion contrast relative to the background ring median, m/s.
    pub contrast: f64,
    pub background_sos: f64,
    pub smooth_background: bool,
    /// Exact inclusion outline for geometric phantoms.
    pub geometry: Option<InclusionGeometry>,
}

/// Circle (equal half-extents) or axis-aligned rectangle, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InclusionGeometry {
    pub center_m: [f64; 2],
    pub half_extent_m: [f64; 2],
}

impl InclusionGeometry {
    pub fn area_m2(&self, shape: InclusionShape) -> Option<f64> {
        let [hx, hz] = self.half_extent_m;
        match shape {
            InclusionShape::Circle => Some(std::f64::consts::PI * hx * hx),
            InclusionShape::Rectangle => Some(4.0 * hx * hz),
            InclusionShape::Blob => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPhantom {
    pub sos: Array2<f64>,
    pub inclusion_mask: Array2<bool>,
    pub background_mask: Array2<bool>,
    pub meta: PhantomMeta,
}

/// SplitMix64 step: decorrelated per-item seeds from one base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn background_field(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> (Array2<f64>, f64, bool) {
    let g = spec.grid;
    let (lo, hi) = spec.background_sos_range;
    let base = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let smooth = match spec.background_mode {
        BackgroundMode::Constant => false,
        BackgroundMode::Smooth => true,
        BackgroundMode::Mixed => rng.random_bool(0.5),
    };
    let mut field = Array2::from_elem(g.shape(), base);
    if smooth && spec.smooth_amplitude > 0.0 {
        // Quadratic polynomial in normalized coordinates, peak-normalized.
        let coef: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let amp = rng.random_range(0.0..=spec.smooth_amplitude);
        let poly = Array2::from_shape_fn(g.shape(), |(z, x)| {
            let p = g.cell_center(x, z);
            let u = 2.0 * p.x / g.width_m - 1.0;
            let v = 2.0 * p.z / g.depth_m - 1.0;
            coef[0] * u + coef[1] * v + coef[2] * u * u + coef[3] * u * v + coef[4] * v * v
        });
        let mut sorted: Vec<f64> = poly.iter().copied().collect();
        let mid = median(&mut sorted);
        let peak = poly.iter().fold(0.0f64, |m, &v| m.max((v - mid).abs()));
        if peak > 0.0 {
            field.zip_mut_with(&poly, |c, &p| *c = (*c + amp * (p - mid) / peak).clamp(lo, hi));
        }
    }
    (field, base, smooth)
}

/// Fraction of each cell inside `inside(x, z)`, from an 8×8 subsample.
fn coverage(grid: &ImagingGrid, inside: impl Fn(f64, f64) -> bool) -> Array2<f64> {
    let (dx, dz) = (grid.dx(), grid.dz());
    let n = SUPERSAMPLE;
    Array2::from_shape_fn(grid.shape(), |(iz, ix)| {
        let mut hits = 0usize;
        for a in 0..n {
            for b in 0..n {
                let x = (ix as f64 + (b as f64 + 0.5) / n as f64) * dx;
                let z = (iz as f64 + (a as f64 + 0.5) / n as f64) * dz;
                hits += inside(x, z) as usize;
            }
        }
        hits as f64 / (n * n) as f64
    })
}

fn ring_mask(grid: &ImagingGrid, cover: &Array2<f64>, inclusion: &Array2<bool>, width: f64) -> Array2<bool> {
    let members: Vec<(f64, f64)> = inclusion
        .indexed_iter()
        .filter(|(_, &v)| v)
        .map(|((z, x), _)| {
            let p = grid.cell_center(x, z);
            (p.x, p.z)
        })
        .collect();
    let w2 = width * width;
    Array2::from_shape_fn(grid.shape(), |(z, x)| {
        if cover[[z, x]] > 0.0 {
            return false;
        }
        let p = grid.cell_center(x, z);
        members
            .iter()
            .any(|&(mx, mz)| (p.x - mx).powi(2) + (p.z - mz).powi(2) <= w2)
    })
}

fn signed_contrast(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> f64 {
    let mag = if spec.max_contrast > spec.min_contrast {
        rng.random_range(spec.min_contrast..=spec.max_contrast)
    } else {
        spec.max_contrast
    };
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

fn assemble(
    spec: &PhantomSpec,
    background: Array2<f64>,
    cover: Array2<f64>,
    contrast: f64,
    meta: PhantomMeta,
) -> Result<LabeledPhantom> {
    let g = spec.grid;
    let inclusion_mask = cover.mapv(|c| c >= 0.5);
    if !inclusion_mask.iter().any(|&v| v) {
        return Err(Error::Numerical("inclusion rasterized to zero cells".into()));
    }
    let background_mask = ring_mask(&g, &cover, &inclusion_mask, spec.ring_width_m);
    let mut ring: Vec<f64> = background
        .indexed_iter()
        .filter(|(i, _)| background_mask[*i])
        .map(|(_, &v)| v)
        .collect();
    let reference = if ring.is_empty() {
        meta.background_sos
    } else {
        median(&mut ring)
    };
    let inc_sos = reference + contrast;
    let mut sos = background;
    sos.zip_mut_with(&cover, |c, &f| *c = f * inc_sos + (1.0 - f) * *c);
    let (blo, bhi) = SOS_SANITY_BAND;
    if sos.iter().any(|&c| !(c.is_finite() && c >= blo && c <= bhi)) {
        return Err(Error::Numerical("phantom SoS left the sanity band".into()));
    }
    Ok(LabeledPhantom {
        sos,
        inclusion_mask,
        background_mask,
        meta,
    })
}

/// Background with one or two randomly deformed ellipses sharing a contrast.
pub fn gen_blob_phantom(spec: &PhantomSpec, seed: u64) -> Result<LabeledPhantom> {
    spec.validate()?;
    if spec.family != PhantomFamily::Blob {
        return Err(Error::Parameter("gen_blob_phantom needs a blob spec".into()));
    }
    let g = spec.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (background, base, smooth) = background_field(spec, &mut rng);
    let count = rng.random_range(1..=2usize);
    let mut shapes = Vec::with_capacity(count);
    let scale = g.width_m.min(g.depth_m);
    for _ in 0..count {
        let a = rng.random_range(0.08..=0.25) * scale;
        let b = rng.random_range(0.08..=0.25) * scale;
        let phi: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let n_h = rng.random_range(1..=4usize);
        let mut harmonics = Vec::with_capacity(n_h);
        let mut budget = rng.random_range(0.05..=0.3);
        for h in 0..n_h {
            let amp = if h + 1 == n_h { budget } else { rng.random_range(0.0..=budget) };
            budget -= amp;
            harmonics.push((h as f64 + 2.0, amp, rng.random_range(0.0..std::f64::consts::TAU)));
        }
        let reach = a.max(b) * 1.3;
        let cx = rng.random_range(reach.min(g.width_m / 2.0)..=(g.width_m - reach).max(g.width_m / 2.0));
        let cz = rng.random_range(reach.min(g.depth_m / 2.0)..=(g.depth_m - reach).max(g.depth_m / 2.0));
        shapes.push((cx, cz, a, b, phi, harmonics));
    }
    let cover = coverage(&g, |x, z| {
        shapes.iter().any(|(cx, cz, a, b, phi, harmonics)| {
            let (dx, dz) = (x - cx, z - cz);
            let (c, s) = (phi.cos(), phi.sin());
            let (u, v) = (c * dx + s * dz, -s * dx + c * dz);
            let r = (u * u + v * v).sqrt();
            if r == 0.0 {
                return true;
            }
            let psi = v.atan2(u);
            let r_ellipse = a * b / ((b * psi.cos()).powi(2) + (a * psi.sin()).powi(2)).sqrt();
            let modulation: f64 = harmonics.iter().map(|(h, amp, ph)| amp * (h * psi + ph).cos()).sum();
            r <= r_ellipse * (1.0 + modulation)
        })
    });
    let contrast = signed_contrast(spec, &mut rng);
    let meta = PhantomMeta {
        family: PhantomFamily::Blob,
        shape: InclusionShape::Blob,
        seed,
        contrast,
        background_sos: base,
        smooth_background: smooth,
        geometry: None,
    };
    assemble(spec, background, cover, contrast, meta)
}

/// One circle or rectangle fully inside the grid.
pub fn gen_geometric_phantom_with(spec: &PhantomSpec, seed: u64, shape: InclusionShape) -> Result<LabeledPhantom> {
    spec.validate()?;
    if spec.family != PhantomFamily::Geometric {
        return Err(Error::Parameter("geometric phantoms need a geometric spec".into()));
    }
    let g = spec.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (background, base, smooth) = background_field(spec, &mut rng);
    let scale = g.width_m.min(g.depth_m);
    let (hx, hz) = match shape {
        InclusionShape::Circle => {
            let r = rng.random_range(0.125..=0.3) * scale;
            (r, r)
        }
        InclusionShape::Rectangle => (rng.random_range(0.1..=0.25) * scale, rng.random_range(0.1..=0.25) * scale),
        InclusionShape::Blob => return Err(Error::Parameter("geometric phantoms are circles or rectangles".into())),
    };
    let pad = g.dx().max(g.dz());
    let cx = rng.random_range(hx + pad..=g.width_m - hx - pad);
    let cz = rng.random_range(hz + pad..=g.depth_m - hz - pad);
    let cover = match shape {
        InclusionShape::Circle => coverage(&g, |x, z| (x - cx).powi(2) + (z - cz).powi(2) <= hx * hx),
        _ => coverage(&g, |x, z| (x - cx).abs() <= hx && (z - cz).abs() <= hz),
    };
    let contrast = signed_contrast(spec, &mut rng);
    let meta = PhantomMeta {
        family: PhantomFamily::Geometric,
        shape,
        seed,
        contrast,
        background_sos: base,
        smooth_background: smooth,
        geometry: Some(InclusionGeometry {
            center_m: [cx, cz],
            half_extent_m: [hx, hz],
        }),
    };
    assemble(spec, background, cover, contrast, meta)
}

/// Geometric phantom whose shape is drawn from the seed (one in eight is a
/// rectangle).
pub fn gen_geometric_phantom(spec: &PhantomSpec, seed: u64) -> Result<LabeledPhantom> {
    let shape = if ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX)).random_range(0..8) == 7 {
        InclusionShape::Rectangle
    } else {
        InclusionShape::Circle
    };
    gen_geometric_phantom_with(spec, seed, shape)
}

/// Fixed set layout: every eighth phantom is a rectangle, so 32 phantoms
/// hold 28 circles and 4 rectangles.
pub fn gen_geometric_set(spec: &PhantomSpec, count: usize) -> Result<Vec<LabeledPhantom>> {
    (0..count)
        .map(|i| {
            let shape = if i % 8 == 7 {
                InclusionShape::Rectangle
            } else {
                InclusionShape::Circle
            };
            gen_geometric_phantom_with(spec, derive_seed(spec.rng_seed, i as u64), shape)
        })
        .collect()
}

pub fn gen_phantom(spec: &PhantomSpec, seed: u64) -> Result<LabeledPhantom> {
    match spec.family {
        PhantomFamily::Blob => gen_blob_phantom(spec, seed),
        PhantomFamily::Geometric => gen_geometric_phantom(spec, seed),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObservation {
    /// Relative slowness the delays were synthesized from.
    pub slowness: Array2<f64>,
    pub delays: Vec<DelayField>,
    pub truth_model_id: String,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Delays `L_truth (1/c − σ0)` plus seeded white Gaussian noise.
pub fn synthesize_observation(
    phantom: &LabeledPhantom,
    truth_model: &ForwardModel,
    truth_model_id: &str,
    bf: &BeamformingConfig,
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticObservation> {
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::Parameter(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    truth_model.grid.check_shape("phantom", phantom.sos.shape())?;
    let slowness = sos_to_slowness(&phantom.sos, bf)?;
    let mut clean = truth_model.apply(&slowness)?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
        for field in &mut clean {
            field.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }
    Ok(SyntheticObservation {
        slowness,
        delays: clean.into_iter().map(DelayField::new).collect(),
        truth_model_id: truth_model_id.to_string(),
        noise_sigma,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub id: usize,
    pub split: Split,
    /// Seed of this sample's phantom and noise.
    pub seed: u64,
}

/// Seeded random assignment of ids `0..n_train + n_val + n_test` to splits.
/// Records are listed by id.
pub fn make_splits(n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Vec<SplitRecord> {
    let total = n_train + n_val + n_test;
    let mut ids: Vec<usize> = (0..total).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = vec![Split::Train; total];
    for (rank, &id) in ids.iter().enumerate() {
        split[id] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    (0..total)
        .map(|id| SplitRecord {
            id,
            split: split[id],
            seed: derive_seed(seed, id as u64),
        })
        .collect()
}
