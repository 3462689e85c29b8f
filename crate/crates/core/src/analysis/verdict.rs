//! Feedback sets and the sufficiency test for candidate extremals.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::fields::{FinalCost, VelocityField};
use crate::measure::{EmpiricalMeasure, Point};
use crate::pmp::{check_maximisation, terminal_costate_gap, StateCostateEnsemble};
use crate::value::{value_monotonicity_check, ExhaustiveValue, MonotonicityReport, ValueHandle};

use super::dini::dini_lower_derivative;
use super::sensitivity::{dini_sensitivity_check, SensitivityCertificate};

#[derive(Debug, Clone, Serialize)]
pub struct FeedbackRow {
    pub control: Vec<f64>,
    pub lower_derivative: f64,
    pub member: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeedbackSet {
    pub t: f64,
    pub rows: Vec<FeedbackRow>,
    pub tolerance: f64,
}

impl FeedbackSet {
    pub fn members(&self) -> impl Iterator<Item = &FeedbackRow> {
        self.rows.iter().filter(|r| r.member)
    }

    pub fn contains(&self, u: &Point) -> bool {
        self.members().any(|r| r.control.iter().zip(u.iter()).all(|(a, b)| (a - b).abs() <= 1e-12))
    }
}

/// Controls whose velocity `v(t, m, u, .)` has lower Dini derivative
/// `d- V(t, m)(1, v) <= tol`.
#[allow(clippy::too_many_arguments)]
pub fn feedback_membership(
    value: &dyn ValueHandle,
    field: &dyn VelocityField,
    t: f64,
    m: &EmpiricalMeasure,
    samples: &[Point],
    eps: &[f64],
    tol: f64,
) -> Result<FeedbackSet> {
    let rows = samples
        .par_iter()
        .map(|u| {
            let v: Vec<Point> = m.atoms().iter().map(|x| field.eval(t, m, u, x)).collect();
            let d = dini_lower_derivative(value, t, m, 1.0, &v, eps)?.estimate;
            Ok(FeedbackRow { control: u.iter().copied().collect(), lower_derivative: d, member: d <= tol })
        })
        .collect::<Result<_>>()?;
    Ok(FeedbackSet { t, rows, tolerance: tol })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING-KEBAB-CASE")]
pub enum VerdictStatus {
    OptimalConsistent,
    Inconclusive,
}

impl fmt::Display for VerdictStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictStatus::OptimalConsistent => "OPTIMAL-CONSISTENT",
            VerdictStatus::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SufficiencyParams {
    pub maximisation_tol: f64,
    pub terminal_tol: f64,
    pub sensitivity_tol: f64,
    pub epsilons: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub reason: String,
    pub max_maximisation_residual: f64,
    pub terminal_gap: f64,
    pub monotonicity: Option<MonotonicityReport>,
    pub certificate: Option<SensitivityCertificate>,
}

/// Runs the sufficiency test on a candidate extremal: PMP preconditions,
/// constancy of the value along the pair, and the Dini sensitivity relation in
/// the direction of the optimal velocity with `h = 1` at `nodes`.
pub fn sufficiency_verdict(
    ensemble: &StateCostateEnsemble,
    field: &dyn VelocityField,
    cost: &dyn FinalCost,
    value: &ExhaustiveValue,
    nodes: &[usize],
    params: &SufficiencyParams,
) -> Result<Verdict> {
    let residuals = check_maximisation(ensemble, field, value.samples())?;
    let max_res = residuals.iter().copied().fold(0.0, f64::max);
    let terminal_gap = terminal_costate_gap(ensemble, cost)?;
    let mut verdict = Verdict {
        status: VerdictStatus::Inconclusive,
        reason: String::new(),
        max_maximisation_residual: max_res,
        terminal_gap,
        monotonicity: None,
        certificate: None,
    };
    if max_res > params.maximisation_tol {
        verdict.reason = format!("precondition: maximisation residual {max_res:.3e} exceeds {:.1e}", params.maximisation_tol);
        return Ok(verdict);
    }
    if terminal_gap > params.terminal_tol {
        verdict.reason = format!("precondition: terminal costate gap {terminal_gap:.3e} exceeds {:.1e}", params.terminal_tol);
        return Ok(verdict);
    }
    let mono = value_monotonicity_check(value, ensemble.grid.t0(), &ensemble.measure_at(0), &ensemble.control)?;
    if !mono.constant {
        verdict.reason = "value is not constant along the pair".into();
        verdict.monotonicity = Some(mono);
        return Ok(verdict);
    }
    let directions: Vec<Vec<Point>> = nodes
        .iter()
        .map(|&k| {
            let t = ensemble.grid.node(k);
            let mu = ensemble.measure_at(k);
            mu.atoms().iter().map(|x| field.eval(t, &mu, ensemble.control_at(k), x)).collect()
        })
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (&k, f) in nodes.iter().zip(directions) {
        let cert = dini_sensitivity_check(ensemble, field, value, &mono, &[k], &[(1.0, f)], &params.epsilons, params.sensitivity_tol)?;
        rows.extend(cert.rows);
        skipped.extend(cert.skipped_nodes);
    }
    let pass = rows.iter().all(|r| r.margin >= -params.sensitivity_tol);
    let cert = SensitivityCertificate { rows, tolerance: params.sensitivity_tol, skipped_nodes: skipped, pass };
    verdict.monotonicity = Some(mono);
    if pass {
        verdict.status = VerdictStatus::OptimalConsistent;
        verdict.reason = "all checks passed".into();
    } else {
        verdict.reason = format!("sensitivity margin {:.3e} below tolerance", cert.min_margin());
    }
    verdict.certificate = Some(cert);
    Ok(verdict)
}
