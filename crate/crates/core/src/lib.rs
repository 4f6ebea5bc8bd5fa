//! Asynchronous autoregressive video diffusion at desk scale.
//!
//! - [`schedule`]: noise schedule and per-frame diffusion kernels.
//! - [`lattice`]: non-decreasing timestep compositions, exact counts, FoPP sampling.
//! - [`trajectory`]: AD inference trajectories.
//! - [`denoiser`]: a small temporally-causal x0-predicting transformer.
//! - [`training`] and [`sampling`]: the train and generate loops.
//! - [`verification`]: brute-force oracles and statistical checks.
//! - [`checks`]: named verification suites.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checks;
pub mod denoiser;
pub mod error;
pub mod latent;
pub mod lattice;
pub mod par;
pub mod sampling;
pub mod schedule;
pub mod training;
pub mod trajectory;
pub mod verification;

pub use error::{Error, Result};
pub use latent::LatentVideo;
pub use lattice::{CountTables, TimestepComposition};
pub use schedule::NoiseSchedule;
pub use trajectory::{plan_trajectory, TrajectoryPlan, TrajectoryStep};
