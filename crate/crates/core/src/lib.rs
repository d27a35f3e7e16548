//! Tabular laboratory for Taylor expansions of Q-functions and of the RL
//! objective.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: exact tabular MDPs, policies, value tables and analytic solvers.
//! - [`taylor`]: expansion terms `U_k`, objective orders `L_k`, residuals,
//!   residual bounds and the monotonic-improvement lower bound.
//! - [`offpolicy`]: return-based off-policy evaluation operators, the GAE link
//!   and trajectory value-target recursions (first/second order, Retrace,
//!   V-trace).
//! - [`sampling`]: trajectory simulation and Monte-Carlo estimators of `L_k`.
//! - [`optimizer`]: tabular softmax policy optimization (TayPO-1/TayPO-2 and
//!   generalized TRPO with an explicit l1 trust region).
//! - [`experiment`]: configuration, experiment runners and CSV output used by
//!   the `taypo-lab` binary.
//!
//! State-action pairs are always flattened row-major as `x * num_actions + a`.

// Negated float comparisons intentionally reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mdp;
pub mod offpolicy;
pub mod optimizer;
pub mod rng;
pub mod sampling;
pub mod taylor;

pub use error::{Error, Result};
pub use mdp::{Mdp, QTable, TabularPolicy, VTable};
