//! Mesh-free solver for the regularized long wave equation
//!
//!     u_t + u_x + eps * u * u_x - mu * u_xxt = 0
//!
//! A small multilayer perceptron u(x, t; theta) is trained to satisfy the
//! equation at collocation points together with initial and boundary data.
//! Loss terms are balanced by trainable log-precision weights, optionally
//! augmented with a penalty on the drift of the three conserved integrals
//! of the equation. A classical finite-difference scheme lives alongside the
//! network solver as an independent reference.
//!
//! Module map:
//! - [`autodiff`]: forward-mode jets for the (x, t) partials in the residual
//!   and a reverse tape for parameter gradients.
//! - [`network`]: MLP description, flat parameter vector, initialization and
//!   forward passes.
//! - [`physics`]: scenarios, exact solutions, residual, conserved integrals.
//! - [`loss`]: collocation sets and the recorded loss graph.
//! - [`optim`]: Adam and L-BFGS with a strong Wolfe line search.
//! - [`train`]: training orchestration, temporal windows, checkpoints.
//! - [`reference`]: finite-difference reference solver.
//! - [`metrics`]: error norms, conservation drift, peak extraction.
//! - [`cli`]: the `rlw-pinn` command line.

pub mod autodiff;
pub mod cli;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod physics;
pub mod reference;
pub mod train;
