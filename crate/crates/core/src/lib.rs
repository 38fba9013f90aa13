//! Differentially-private federated learning testbed.
//!
//! The crate is organised bottom-up:
//!
//! - [`constants`]: analysis parameters and every derived constant the bounds use.
//! - [`bounds`]: the geometric bound, the corrected polynomial
//!   bound, the per-round recursions and their unrolled forms.
//! - [`noise`]: Gaussian uplink noise, Monte-Carlo and analytic norm moments.
//! - [`flsim`]: synthetic federated problems and the noising-before-aggregation
//!   training loop that produces [`flsim::Trajectory`] records.
//! - [`audit`]: numerical checks of each inequality step on trajectories and
//!   sampled points.

pub mod audit;
pub mod bounds;
pub mod constants;
mod error;
pub mod flsim;
pub mod noise;

pub use error::{Error, Result};
