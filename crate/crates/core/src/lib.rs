//! Risk-aware multi-robot, multi-target tracking with heterogeneous sensors.
//!
//! A team of robots carrying linear, distance-degraded sensors tracks a set of
//! linear targets with a centralized Kalman filter. Each step a constrained
//! nonlinear program picks the next robot positions, trading tracking quality
//! (posterior covariance) against the risk of target-induced sensor failures
//! (an immunity-weighted observability Gramian). The trade-off is steered by
//! the sensing margin: how many sensors the team has beyond the minimum needed
//! for collective observability.
//!
//! Module map:
//!
//! - [`sensing`]: sensor library, sensor matrix, measurement and noise models.
//! - [`world`]: ground truth targets, risk fields, measurements and failures.
//! - [`estimation`]: multi-target Kalman filter.
//! - [`observability`]: Gramians, minimal sensor set and sensing margin.
//! - [`optimizer`]: augmented-Lagrangian NLP solver.
//! - [`controller`]: the per-step risk-aware tracking program.
//! - [`harness`]: scenario files, the closed loop, experiment drivers, export.

pub mod controller;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod linalg;
pub mod observability;
pub mod optimizer;
pub mod sensing;
pub mod world;

pub use error::{Error, Result};
