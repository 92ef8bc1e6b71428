//! Data-driven predictive control from raw input/output trajectories.
//!
//! The crate builds a receding-horizon controller directly from recorded
//! plant data, with no identified state-space model in the loop:
//!
//! * [`signal`] — trajectory containers, (mosaic-)Hankel matrices and
//!   persistency-of-excitation checks;
//! * [`qp`] — a dense strictly-convex quadratic-program solver (primal
//!   active-set) plus equality-constrained KKT solves, the exact oracle
//!   everything else is validated against;
//! * [`deepc`] — assembly and solution of the data-driven tracking problem
//!   over the Hankel combination vector `g`;
//! * [`deene`] — closed-form sensitivity corrections of a solved instance
//!   under perturbed initial windows and references, replacing per-step
//!   re-solves, plus the receding-horizon controller built on them;
//! * [`plants`] — simulated plants (linear state-space, planar arm),
//!   reference generators and keep-out constraints used by the test
//!   harness and the command-line tools.

pub mod deene;
pub mod deepc;
pub mod plants;
pub mod qp;
pub mod signal;
