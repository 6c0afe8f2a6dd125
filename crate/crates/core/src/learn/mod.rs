//! Learning convolutional kernels from (slowness, delay) training pairs.
//!
//! Two closed-form learners share one stacked least-squares system:
//!
//! * **unconstrained**: every kernel element is free,
//!   `(𝕊ᵀ𝕊 + λ_k D_kᵀD_k) k = 𝕊ᵀ𝕋_p`;
//! * **constrained**: the kernel is the centerline path laterally widened
//!   by a learned per-depth profile, `k = G_p f`, and
//!   `(G_pᵀ𝕊ᵀ𝕊G_p + λ_f D_fᵀD_f) f = G_pᵀ𝕊ᵀ𝕋_p`.
//!
//! Every solution is certified against the matrix-free normal equations.

mod constrained;
mod regularizer;
mod system;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::conv::{DelayField, ForwardModel, Kernel, KernelDims};
use crate::error::{Error, Result};
use crate::geometry::{ImagingGrid, PairSchedule, SteeringPair};
use crate::linalg::solve_certified;
use crate::parallel;

pub use constrained::{
    build_path_basis, kernel_from_profile, learn_profile_constrained, PathBasis, ProfileMatrix,
};
pub use regularizer::{kernel_difference_operator, profile_difference_operator};

use system::StackedSystem;

/// Relative slowness map with its per-pair delay observations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `s = σ − σ0`, s/m.
    pub slowness: Array2<f64>,
    /// One field per schedule pair, in schedule order.
    pub delays: Vec<DelayField>,
}

/// How `lambda_k` / `lambda_f` are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LambdaScale {
    /// Used as given.
    Absolute,
    /// Multiplied by the largest absolute entry of the data Gram matrix.
    #[default]
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub lambda_k: f64,
    pub lambda_f: f64,
    pub scale: LambdaScale,
    /// Weight of axial first differences (kernel rows / profile depths).
    pub axial_weight: f64,
    /// Weight of lateral first differences.
    pub lateral_weight: f64,
    /// Weight of the rows pinning the outer profile taps to zero.
    pub pin_weight: f64,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        Self {
            lambda_k: 1e-3,
            lambda_f: 1e-2,
            scale: LambdaScale::Relative,
            axial_weight: 10.0,
            lateral_weight: 0.1,
            pin_weight: 1e3,
        }
    }
}

impl RegularizerSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_k", self.lambda_k),
            ("lambda_f", self.lambda_f),
            ("axial_weight", self.axial_weight),
            ("lateral_weight", self.lateral_weight),
            ("pin_weight", self.pin_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub(crate) fn resolve(&self, lambda: f64, gram_max: f64) -> f64 {
        match self.scale {
            LambdaScale::Absolute => lambda,
            LambdaScale::Relative => lambda * gram_max,
        }
    }
}

/// Steering pair together with its position in the schedule (and thus in
/// every sample's `delays`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRef {
    pub index: usize,
    pub pair: SteeringPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedKernel {
    pub kernel: Kernel,
    /// Present for the constrained learner.
    pub profile: Option<ProfileMatrix>,
    /// Training-fit RMSE of the delays, seconds.
    pub fit_rmse_t: f64,
    /// Certified relative normal-equation residual.
    pub relative_residual: f64,
    /// Absolute regularization weight that was applied.
    pub lambda: f64,
}

/// Closed-form ridge estimate of one pair's kernel from stacked samples.
pub fn learn_kernel_unconstrained(
    samples: &[TrainingSample],
    pair: PairRef,
    dims: KernelDims,
    reg: &RegularizerSpec,
) -> Result<LearnedKernel> {
    reg.validate()?;
    let system = StackedSystem::new(samples, dims, &[pair.index])?;
    unconstrained_on(&system, pair, reg)
}

fn unconstrained_on(system: &StackedSystem<'_>, pair: PairRef, reg: &RegularizerSpec) -> Result<LearnedKernel> {
    let dims = system.dims;
    if system.valid_count(pair.index) == 0 {
        return Err(Error::Data(format!("no valid measurements for pair {}", pair.pair)));
    }
    let gram = system.gram(pair.index);
    let lambda = reg.resolve(reg.lambda_k, gram.amax());
    let d = kernel_difference_operator(dims, reg.axial_weight, reg.lateral_weight);
    let mut normal = gram.into_owned();
    if lambda > 0.0 {
        normal += d.gram() * lambda;
    }
    let rhs_img = system.rhs(pair.index);
    let rhs = nalgebra::DVector::from_iterator(dims.len(), rhs_img.iter().copied());
    let to_img = |x: &nalgebra::DVector<f64>| Array2::from_shape_vec((dims.kz, dims.kx), x.as_slice().to_vec()).expect("shape");
    let solved = solve_certified(&normal, &rhs, lambda > 0.0, |x| {
        let k = to_img(x);
        let mut y = system.apply_gram(pair.index, &k);
        if lambda > 0.0 {
            let dd = d.tmatvec(&d.matvec(x.as_slice()));
            y.iter_mut().zip(dd).for_each(|(a, b)| *a += lambda * b);
        }
        nalgebra::DVector::from_iterator(dims.len(), y.iter().copied())
    })
    .map_err(|e| e.context(format!("unconstrained kernel for {}", pair.pair)))?;
    let values = to_img(&solved.x);
    let fit = system.fit_rmse(pair.index, &values);
    Ok(LearnedKernel {
        kernel: Kernel::new(values, pair.pair)?,
        profile: None,
        fit_rmse_t: fit,
        relative_residual: solved.relative_residual,
        lambda,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LearnMode {
    Unconstrained,
    Constrained { n_c: usize },
}

impl LearnMode {
    /// Lateral margin learned kernels need around the bare rays.
    pub fn margin_cells(&self) -> usize {
        match self {
            LearnMode::Unconstrained => 0,
            LearnMode::Constrained { n_c } => n_c.saturating_sub(1) / 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LearnMode::Unconstrained => "unconstrained",
            LearnMode::Constrained { .. } => "constrained",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFit {
    pub pair: SteeringPair,
    pub fit_rmse_t: f64,
    pub relative_residual: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    pub mode: LearnMode,
    pub n_samples: usize,
    pub pairs: Vec<PairFit>,
}

/// Learns one kernel per schedule pair. Per-pair problems are independent
/// and run in parallel; the pair-independent Gram matrix is built once.
pub fn learn_model(
    samples: &[TrainingSample],
    grid: &ImagingGrid,
    schedule: &PairSchedule,
    mode: LearnMode,
    reg: &RegularizerSpec,
) -> Result<(ForwardModel, LearnReport, Vec<LearnedKernel>)> {
    reg.validate()?;
    let dims = KernelDims::for_schedule(grid, schedule, mode.margin_cells());
    if let Some(s) = samples.iter().find(|s| s.delays.len() != schedule.len()) {
        return Err(Error::Shape(format!(
            "sample has {} delay fields, schedule has {} pairs",
            s.delays.len(),
            schedule.len()
        )));
    }
    let indices: Vec<usize> = (0..schedule.len()).collect();
    let system = StackedSystem::new(samples, dims, &indices)?;
    let refs: Vec<PairRef> = schedule
        .pairs()
        .iter()
        .enumerate()
        .map(|(index, &pair)| PairRef { index, pair })
        .collect();
    let learned = parallel::try_map(&refs, |&pr| {
        let out = match mode {
            LearnMode::Unconstrained => unconstrained_on(&system, pr, reg),
            LearnMode::Constrained { n_c } => {
                let basis = build_path_basis(grid, pr.pair, n_c, dims)?;
                constrained::constrained_on(&system, pr, &basis, reg)
            }
        };
        out.map_err(|e| e.context(format!("pair {}", pr.pair)))
    })?;
    let model = ForwardModel::new(*grid, learned.iter().map(|l| l.kernel.clone()).collect())?;
    let report = LearnReport {
        mode,
        n_samples: samples.len(),
        pairs: learned
            .iter()
            .map(|l| PairFit {
                pair: l.kernel.pair,
                fit_rmse_t: l.fit_rmse_t,
                relative_residual: l.relative_residual,
                lambda: l.lambda,
            })
            .collect(),
    };
    Ok((model, report, learned))
}
