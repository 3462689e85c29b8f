//! Numerical checks of semiconcavity, sensitivity relations, constancy of the
//! Hamiltonian-type functionals, sufficiency and feedback sets.

mod dini;
mod semiconcavity;
mod sensitivity;
mod verdict;

use crate::error::Result;
use crate::measure::EmpiricalMeasure;

/// A real functional on measures, such as a final cost or `V(tau, .)`.
pub type Functional<'a> = dyn Fn(&EmpiricalMeasure) -> Result<f64> + Sync + 'a;

pub use dini::{
    dini_lower_derivative, dini_quotients, dini_upper_derivative, regularised_lower_derivative, DiniEstimate,
    RegularisedEstimate, DEFAULT_EPSILONS,
};
pub use semiconcavity::{
    geodesic_semiconcavity_defect, interpolation_inequality_check, joint_semiconcavity_defect,
    strong_semiconcavity_defect, DefectReport,
};
pub use sensitivity::{
    constancy_monitor, dini_sensitivity_check, frechet_sensitivity_check, lebesgue_nodes,
    subdifferential_propagation_check, ConstancyReport, FrechetCertificate, FrechetRow, PropagationReport,
    PropagationRow, SensitivityCertificate, SensitivityRow, DEFAULT_TOL_SENS, INTEGRATOR_TOL, VALUE_TOL,
};
pub use verdict::{
    feedback_membership, sufficiency_verdict, FeedbackRow, FeedbackSet, SufficiencyParams, Verdict, VerdictStatus,
};

/// Names of the checks exposed by the scenario runner.
pub const CHECK_NAMES: [&str; 17] = [
    "field_derivatives",
    "semigroup",
    "taylor_residual",
    "adjoint_gradient",
    "maximisation",
    "value",
    "value_monotonicity",
    "lipschitz",
    "geodesic_semiconcavity",
    "strong_semiconcavity",
    "joint_semiconcavity",
    "interpolation_inequality",
    "dini_sensitivity",
    "frechet_sensitivity",
    "constancy",
    "sufficiency",
    "feedback",
];
