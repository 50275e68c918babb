//! Safe-control synthesis with time-varying differentiable-optimization
//! control barrier functions (TVCBFs).
//!
//! The crate is organized around the pipeline that turns geometry into safe
//! controls:
//!
//! * [`geometry`] — convex primitives (spheres, halfspace polytopes, capsules)
//!   and rigid-body poses.
//! * [`conic`] — a small dense primal-dual interior-point solver for problems
//!   with linear and second-order-cone rows.
//! * [`scaling`] — the minimum uniform-scaling collision program between two
//!   posed primitives, with pose gradients.
//! * [`distance`] — an independent GJK distance oracle used for
//!   cross-validation of the scaling solver.
//! * [`estimation`] — a quaternion EKF with a constant-velocity model and
//!   Mahalanobis-distance machinery.
//! * [`cbf`] — TVCBF values, time partials, noise-robust worst-case
//!   configurations, actuation inflation, and QP constraint rows.
//! * [`control`] — the TVCBFQP safety filter, reference controllers, and a
//!   sphere-based linear-MPC baseline.
//! * [`sim`] — a discrete-time scenario engine with traces, metrics, and the
//!   built-in experiment scenarios.

pub mod cbf;
pub mod conic;
pub mod control;
pub mod distance;
pub mod estimation;
pub mod geometry;
pub mod scaling;
pub mod sim;

mod error;

pub use error::{Error, Result};
