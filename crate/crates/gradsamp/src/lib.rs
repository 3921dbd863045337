//! Gradient sampling for nonsmooth, possibly nonconvex minimization.
//!
//! The solver follows the classic gradient-sampling template: gradients are
//! collected at the iterate and at nearby sampled points, the minimum-norm
//! element of their convex hull (in a quasi-Newton metric) defines a search
//! direction, and the sampling radius shrinks as stationarity is approached.
//! Three subproblem regimes are supported: exact solves, inexact solves with
//! certificate-based early termination, and inexact solves over a compressed
//! matrix in which the previous hull solution is carried as a single
//! aggregated column.

mod core;
pub mod driver;
pub mod linesearch;
pub mod problems;
pub mod qp;
pub mod quasinewton;
pub mod sampling;
pub mod subproblem;

pub use crate::core::*;
