//! Scenario files: a problem (inline or from the reference catalogue), the
//! control along which PMP-based checks run, and the checks to perform.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mfc_core::analysis::{DEFAULT_EPSILONS, DEFAULT_TOL_SENS};
use mfc_core::problem::{reference_problem, MeasureSpec, ProblemSpec};
use mfc_core::value::DEFAULT_BUDGET;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Name of a reference problem; exclusive with `problem`.
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default)]
    pub problem: Option<ProblemSpec>,
    #[serde(default)]
    pub candidate: Candidate,
    #[serde(default = "default_budget")]
    pub value_budget: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub checks: Checks,
}

fn default_budget() -> u64 {
    DEFAULT_BUDGET as u64
}

/// Control along which costates, sensitivity and sufficiency checks run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidate {
    /// The problem's own control.
    #[default]
    Nominal,
    /// The minimiser found by exhaustive enumeration from the initial measure.
    Exhaustive,
    /// The result of the forward-backward sweep.
    Sweep,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        // serde_json errors carry "at line L column C"
        let s: Scenario = serde_json::from_str(text)?;
        if s.schema_version != SCHEMA_VERSION {
            bail!("unsupported schema_version {} (expected {SCHEMA_VERSION})", s.schema_version);
        }
        if s.reference.is_some() == s.problem.is_some() {
            bail!("exactly one of `reference` and `problem` must be given");
        }
        if s.checks.enabled().is_empty() {
            bail!("no checks requested");
        }
        Ok(s)
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        match (&self.reference, &self.problem) {
            (Some(name), None) => Ok(reference_problem(name)?),
            (None, Some(p)) => Ok(p.clone()),
            _ => unreachable!("validated in parse"),
        }
    }
}

fn epsilons() -> Vec<f64> {
    DEFAULT_EPSILONS.to_vec()
}

fn tol_sens() -> f64 {
    DEFAULT_TOL_SENS
}

fn nine_lambdas() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldDerivatives {
    pub step: f64,
}

impl Default for FieldDerivatives {
    fn default() -> Self {
        Self { step: mfc_core::fields::FD_STEP }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Semigroup {
    /// Intermediate time; the grid midpoint when absent.
    pub split: Option<f64>,
    pub tol: f64,
}

impl Default for Semigroup {
    fn default() -> Self {
        Self { split: None, tol: 1e-10 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Taylor {
    /// Initial time; the midpoint of the first control interval when absent.
    pub tau: Option<f64>,
    pub epsilons: Vec<f64>,
    /// Time offset; sized to keep `tau + eps dh` inside its control interval
    /// when absent.
    pub dh: Option<f64>,
    /// Size of the random space offsets and of the plan displacement.
    pub scale: f64,
    /// Integration steps per scenario step.
    pub refine: usize,
    pub slope_range: [f64; 2],
}

impl Default for Taylor {
    fn default() -> Self {
        Self { tau: None, epsilons: vec![1e-1, 1e-2, 1e-3], dh: None, scale: 0.5, refine: 25, slope_range: [1.8, 2.2] }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjointGradient {
    pub step: f64,
    pub tol: f64,
}

impl Default for AdjointGradient {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Maximisation {
    pub tol: f64,
}

impl Default for Maximisation {
    fn default() -> Self {
        Self { tol: 1e-8 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueQuery {
    /// Start of the horizon when absent.
    #[serde(default)]
    pub tau: Option<f64>,
    /// The initial measure when absent.
    #[serde(default)]
    pub measure: Option<MeasureSpec>,
    #[serde(default)]
    pub expect: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueCheck {
    pub queries: Vec<ValueQuery>,
    pub tol: f64,
}

impl Default for ValueCheck {
    fn default() -> Self {
        Self { queries: vec![ValueQuery { tau: None, measure: None, expect: None }], tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonotonicityExpectation {
    #[default]
    Constant,
    Nondecreasing,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Monotonicity {
    pub expect: MonotonicityExpectation,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lipschitz {
    pub radius: f64,
    pub neighbors: usize,
}

impl Default for Lipschitz {
    fn default() -> Self {
        Self { radius: 0.1, neighbors: 4 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectTarget {
    #[default]
    Cost,
    Value,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defect {
    pub target: DefectTarget,
    /// Time at which the value function is evaluated.
    pub tau: Option<f64>,
    /// Second measure; a seeded perturbation of the initial measure when absent.
    pub other: Option<MeasureSpec>,
    pub radius: f64,
    pub lambdas: Vec<f64>,
    pub bound: Option<f64>,
}

impl Default for Defect {
    fn default() -> Self {
        Self { target: DefectTarget::Cost, tau: None, other: None, radius: 0.5, lambdas: nine_lambdas(), bound: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointDefect {
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
    pub other: Option<MeasureSpec>,
    pub radius: f64,
    pub lambdas: Vec<f64>,
    pub bound: Option<f64>,
}

impl Default for JointDefect {
    fn default() -> Self {
        Self { tau1: None, tau2: None, other: None, radius: 0.5, lambdas: nine_lambdas(), bound: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Interpolation {
    pub other: Option<MeasureSpec>,
    pub radius: f64,
    pub lambdas: Vec<f64>,
    pub bound: Option<f64>,
}

impl Default for Interpolation {
    fn default() -> Self {
        Self { other: None, radius: 0.5, lambdas: nine_lambdas(), bound: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiniSensitivity {
    pub directions: usize,
    pub scale: f64,
    /// Grid node indices; the middle node of every control interval when absent.
    pub nodes: Option<Vec<usize>>,
    pub epsilons: Vec<f64>,
    pub tol: f64,
}

impl Default for DiniSensitivity {
    fn default() -> Self {
        Self { directions: 20, scale: 1.0, nodes: None, epsilons: epsilons(), tol: tol_sens() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Frechet {
    /// Grid node index; the middle node when absent.
    pub node: Option<usize>,
    pub radii: Vec<f64>,
    pub tol: f64,
}

impl Default for Frechet {
    fn default() -> Self {
        Self { node: None, radii: vec![1e-7, 1e-6, 1e-4, 1e-3, 1e-2], tol: tol_sens() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Constancy {
    /// Interior grid time that is not a control jump; chosen automatically when absent.
    pub tau: Option<f64>,
    pub other: Option<MeasureSpec>,
    pub radius: f64,
    pub tol: f64,
}

impl Default for Constancy {
    fn default() -> Self {
        Self { tau: None, other: None, radius: 0.5, tol: 1e-5 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sufficiency {
    pub maximisation_tol: f64,
    pub terminal_tol: f64,
    pub tol: f64,
    pub epsilons: Vec<f64>,
    /// Grid node indices; the middle node of every control interval when absent.
    pub nodes: Option<Vec<usize>>,
}

impl Default for Sufficiency {
    fn default() -> Self {
        Self { maximisation_tol: 1e-8, terminal_tol: 1e-9, tol: tol_sens(), epsilons: epsilons(), nodes: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Feedback {
    /// Grid node indices; the middle node of every control interval when absent.
    pub nodes: Option<Vec<usize>>,
    pub epsilons: Vec<f64>,
    pub tol: f64,
}

impl Default for Feedback {
    fn default() -> Self {
        Self { nodes: None, epsilons: epsilons(), tol: tol_sens() }
    }
}

/// Requested checks; an entry enables the check, `{}` keeps its defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checks {
    pub field_derivatives: Option<FieldDerivatives>,
    pub semigroup: Option<Semigroup>,
    pub taylor_residual: Option<Taylor>,
    pub adjoint_gradient: Option<AdjointGradient>,
    pub maximisation: Option<Maximisation>,
    pub value: Option<ValueCheck>,
    pub value_monotonicity: Option<Monotonicity>,
    pub lipschitz: Option<Lipschitz>,
    pub geodesic_semiconcavity: Option<Defect>,
    pub strong_semiconcavity: Option<Defect>,
    pub joint_semiconcavity: Option<JointDefect>,
    pub interpolation_inequality: Option<Interpolation>,
    pub dini_sensitivity: Option<DiniSensitivity>,
    pub frechet_sensitivity: Option<Frechet>,
    pub constancy: Option<Constancy>,
    pub sufficiency: Option<Sufficiency>,
    pub feedback: Option<Feedback>,
}

impl Checks {
    /// Enabled check names in pipeline order.
    pub fn enabled(&self) -> Vec<&'static str> {
        let flags = [
            ("field_derivatives", self.field_derivatives.is_some()),
            ("semigroup", self.semigroup.is_some()),
            ("taylor_residual", self.taylor_residual.is_some()),
            ("adjoint_gradient", self.adjoint_gradient.is_some()),
            ("maximisation", self.maximisation.is_some()),
            ("value", self.value.is_some()),
            ("value_monotonicity", self.value_monotonicity.is_some()),
            ("lipschitz", self.lipschitz.is_some()),
            ("geodesic_semiconcavity", self.geodesic_semiconcavity.is_some()),
            ("strong_semiconcavity", self.strong_semiconcavity.is_some()),
            ("joint_semiconcavity", self.joint_semiconcavity.is_some()),
            ("interpolation_inequality", self.interpolation_inequality.is_some()),
            ("dini_sensitivity", self.dini_sensitivity.is_some()),
            ("frechet_sensitivity", self.frechet_sensitivity.is_some()),
            ("constancy", self.constancy.is_some()),
            ("sufficiency", self.sufficiency.is_some()),
            ("feedback", self.feedback.is_some()),
        ];
        flags.into_iter().filter(|(_, on)| *on).map(|(n, _)| n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mfc_core::analysis::CHECK_NAMES;

    #[test]
    fn minimal_scenario() {
        let s = Scenario::parse(r#"{"schema_version": 1, "name": "s", "reference": "shift", "checks": {"value": {}}}"#).unwrap();
        assert_eq!(s.checks.enabled(), vec!["value"]);
        assert_eq!(s.candidate, Candidate::Nominal);
        assert_eq!(s.problem_spec().unwrap().steps, 40);
    }

    #[test]
    fn errors_point_at_the_line() {
        let text = "{\n  \"schema_version\": 1,\n  \"name\": \"s\",\n  \"reference\": \"shift\",\n  \"checks\": {\"valu\": {}}\n}";
        let msg = format!("{:#}", Scenario::parse(text).unwrap_err());
        assert!(msg.contains("unknown field `valu`") && msg.contains("line 5"), "{msg}");
        let msg = format!("{:#}", Scenario::parse(&text.replace("\"schema_version\": 1", "\"schema_version\": 2").replace("valu", "value")).unwrap_err());
        assert!(msg.contains("schema_version"), "{msg}");
    }

    #[test]
    fn problem_source_is_exclusive() {
        let both = r#"{"schema_version": 1, "name": "s", "checks": {"value": {}}}"#;
        assert!(Scenario::parse(both).is_err());
        let none = r#"{"schema_version": 1, "name": "s", "reference": "shift", "checks": {}}"#;
        assert!(Scenario::parse(none).is_err());
    }

    #[test]
    fn every_check_name_is_accepted() {
        let body: Vec<String> = CHECK_NAMES.iter().map(|n| format!("\"{n}\": {{}}")).collect();
        let text = format!(r#"{{"schema_version": 1, "name": "s", "reference": "zero", "checks": {{{}}}}}"#, body.join(","));
        assert_eq!(Scenario::parse(&text).unwrap().checks.enabled(), CHECK_NAMES.to_vec());
    }
}
