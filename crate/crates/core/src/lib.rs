//! Numerical toolkit for mean-field optimal control on finitely supported
//! probability measures.
//!
//! The crate is organised bottom-up:
//!
//! - [`measure`]: empirical measures and couplings
//! - [`transport`]: exact discrete optimal transport
//! - [`fields`]: controlled non-local velocity fields and terminal costs
//! - [`flow`]: non-local flows of the coupled particle system
//! - [`linearization`]: space, measure and initial-time derivatives of flows
//! - [`pmp`]: Hamiltonian, costates and the forward-backward sweep
//! - [`value`]: value function by exhaustive control enumeration
//! - [`problem`]: serializable problem descriptions and reference problems
//! - [`analysis`]: semiconcavity, sensitivity, sufficiency and feedback checks

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod fields;
pub mod linearization;
pub mod flow;
pub mod measure;
pub mod pmp;
pub mod problem;
pub mod sampling;
mod ode;
pub mod transport;
pub mod value;

pub use error::{Error, Result};
pub use measure::{CouplingPlan, EmpiricalMeasure, Point};
