//! Pulse-echo speed-of-sound imaging with convolutional forward models.
//!
//! The crate covers the whole numerical pipeline:
//!
//! * [`geometry`]: imaging grid, steering-pair schedule and the hand-crafted
//!   line and Hann-window path models.
//! * [`conv`]: the convolutional forward operator (kernel anchored at the
//!   mid-bottom image point, zero padding, Toeplitz form, sparse rows).
//! * [`learn`]: closed-form kernel learning, both unconstrained and
//!   constrained to a centerline path with learned lateral profiles.
//! * [`inversion`]: the L1 data / total-variation reconstruction.
//! * [`phantom`]: seeded synthetic phantoms and delay observations.
//! * [`metrics`]: RMSE and contrast metrics, paired model comparison.
//! * [`array_file`]: the float32 array format shared by all tools.

// `!(x > t)` is used on purpose so that NaN fails every threshold check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod array_file;
pub mod conv;
pub mod error;
pub mod geometry;
pub mod inversion;
pub mod learn;
pub mod linalg;
pub mod metrics;
pub mod parallel;
pub mod phantom;
pub mod stats;

pub use conv::{DelayField, ForwardModel, Kernel, KernelDims};
pub use error::{Error, Result};
pub use geometry::{ImagingGrid, PairSchedule, PathImage, SteeringPair, WindowConfig};
