//! Variance-reduced stochastic approximation for contractive fixed-point
//! equations on finite-dimensional normed spaces.
//!
//! The crate is organized around five modules:
//!
//! - [`vecspace`]: dense vectors and operators, norm/seminorm evaluation,
//!   small dense solves (LU with a Neumann fallback), quotient-space solves
//!   for span-seminorm problems, and log-log rate regression.
//! - [`oracle`]: deterministic counter-based random streams and the
//!   generative observation model (one sample applies the empirical operator
//!   at several points, which is what the coupled recursion needs).
//! - [`problems`]: four tabular problem families (discounted Q-learning,
//!   stochastic shortest paths, zero-sum Markov games, average-cost policy
//!   evaluation) with population and single-sample empirical Bellman
//!   operators, hitting-time weights, and exact fixed-point oracles.
//! - [`solver`]: vanilla stochastic approximation, the ROOT-SA recursion
//!   with burn-in, a restarting wrapper, and stepsize/burn-in tuning rules.
//! - [`diagnostics`]: operator-defect and estimation-error measurements,
//!   noise covariance at the fixed point, Monte Carlo Gaussian complexity,
//!   resolvent functionals, local linearization sets, the rate fixed-point
//!   equation, mixing-time estimation, and contraction audits.
//!
//! The crate is `no_std` (with `alloc`); all file formats, configuration,
//! and the experiment harness live in the companion CLI crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod diagnostics;
pub mod oracle;
pub mod problems;
pub mod solver;
pub mod vecspace;
