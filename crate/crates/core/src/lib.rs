//! Monte Carlo engine and verification toolkit for confined Lagrangian
//! stochastic models: an N-particle system whose velocity drift is a
//! mollified conditional expectation over the empirical measure, with
//! specular reflection at the boundary of the confining domain.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diagnostics;
pub mod drift;
pub mod geometry;
pub mod halfspace_oracle;
pub mod quad;
pub mod simulator;
