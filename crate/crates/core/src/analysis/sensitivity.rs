//! Sensitivity relations between Pontryagin costates and the value function,
//! and the two time-constant functionals built from the linearised flows.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linearization::LinearizationBundle;
use crate::measure::{CouplingPlan, EmpiricalMeasure, Point};
use crate::pmp::StateCostateEnsemble;
use crate::transport::wasserstein;
use crate::value::{MonotonicityReport, ValueHandle};
use crate::fields::VelocityField;

use super::dini::{dini_quotients, dini_upper_derivative, extrapolate};

/// Value discretisation tolerance assumed by the default sensitivity tolerance.
pub const VALUE_TOL: f64 = 1e-6;
/// Integrator tolerance assumed by the default sensitivity tolerance.
pub const INTEGRATOR_TOL: f64 = 1e-8;
pub const DEFAULT_TOL_SENS: f64 = 5.0 * (VALUE_TOL + INTEGRATOR_TOL);

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityRow {
    pub t: f64,
    pub direction: usize,
    pub h: f64,
    /// Extrapolated upper Dini derivative.
    pub left: f64,
    /// `sum_i w_i <-r_i(t), F_i> + h H(t)`.
    pub right: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SensitivityCertificate {
    pub rows: Vec<SensitivityRow>,
    pub tolerance: f64,
    /// Requested nodes dropped because the control jumps there.
    pub skipped_nodes: Vec<f64>,
    pub pass: bool,
}

impl SensitivityCertificate {
    pub fn min_margin(&self) -> f64 {
        self.rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min)
    }

    /// CSV with columns `t, direction, h, left, right, margin`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "direction", "h", "left", "right", "margin"])?;
        for r in &self.rows {
            wr.serialize((r.t, r.direction, r.h, r.left, r.right, r.margin))?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Nodes of `nodes` where the ensemble's control does not jump.
pub fn lebesgue_nodes(ensemble: &StateCostateEnsemble, nodes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let mut keep = Vec::new();
    let mut skipped = Vec::new();
    for &k in nodes {
        let t = ensemble.grid.node(k);
        if ensemble.control.is_jump(t) {
            skipped.push(t);
        } else {
            keep.push(k);
        }
    }
    (keep, skipped)
}

/// Checks `d+ V(t, mu(t))(h, F) <= sum_i w_i <-r_i(t), F_i> + h H(t)` at the
/// given ensemble nodes for every direction.
#[allow(clippy::too_many_arguments)]
pub fn dini_sensitivity_check(
    ensemble: &StateCostateEnsemble,
    field: &dyn VelocityField,
    value: &dyn ValueHandle,
    optimality: &MonotonicityReport,
    nodes: &[usize],
    directions: &[(f64, Vec<Point>)],
    eps: &[f64],
    tol: f64,
) -> Result<SensitivityCertificate> {
    if !optimality.constant {
        return Err(Error::InvalidArgument("the ensemble is not certified optimal".into()));
    }
    let (keep, skipped_nodes) = lebesgue_nodes(ensemble, nodes);
    let jobs: Vec<(usize, usize)> = keep.iter().flat_map(|&k| (0..directions.len()).map(move |d| (k, d))).collect();
    let rows: Vec<SensitivityRow> = jobs
        .par_iter()
        .map(|&(k, d)| {
            let (h, f) = &directions[d];
            let t = ensemble.grid.node(k);
            let mu = ensemble.measure_at(k);
            let left = dini_upper_derivative(value, t, &mu, *h, f, eps)?.estimate;
            let right = ensemble.costate_pairing(k, f) + h * ensemble.optimal_hamiltonian(field, k);
            Ok(SensitivityRow { t, direction: d, h: *h, left, right, margin: right - left })
        })
        .collect::<Result<_>>()?;
    let pass = rows.iter().all(|r| r.margin >= -tol);
    Ok(SensitivityCertificate { rows, tolerance: tol, skipped_nodes, pass })
}

#[derive(Debug, Clone, Serialize)]
pub struct FrechetRow {
    pub w2: f64,
    /// `V(t, mu_2) - V(t, mu(t))`.
    pub lhs: f64,
    /// `sum_ij plan_ij <-r_i(t), y_j - x_i(t)>`.
    pub pairing: f64,
    pub violation: f64,
    /// `violation / W_2`, zero at distance zero.
    pub ratio: f64,
    /// The optimal plan is not unique, so the supremum over optimal plans was
    /// only sampled.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrechetCertificate {
    pub t: f64,
    pub rows: Vec<FrechetRow>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares `V(t, mu_2) - V(t, mu(t))` with the costate pairing along the
/// optimal plan for each test measure. Passes when the violation ratio at the
/// two closest test measures is at most `tol`.
pub fn frechet_sensitivity_check(
    ensemble: &StateCostateEnsemble,
    value: &dyn ValueHandle,
    node: usize,
    test_measures: &[EmpiricalMeasure],
    tol: f64,
) -> Result<FrechetCertificate> {
    let t = ensemble.grid.node(node);
    let mu = ensemble.measure_at(node);
    let base = value.value(t, &mu)?;
    let rs = &ensemble.r_paths[node];
    let mut rows: Vec<FrechetRow> = test_measures
        .par_iter()
        .map(|m2| {
            let opt = wasserstein(2, &mu, m2)?;
            let ys = m2.atoms();
            let pairing: f64 = opt
                .plan
                .entries()
                .map(|(i, j, m)| -m * rs[i].dot(&(&ys[j] - &mu.atoms()[i])))
                .sum();
            let lhs = value.value(t, m2)? - base;
            let violation = lhs - pairing;
            let ratio = if opt.distance > 0.0 { violation / opt.distance } else { 0.0 };
            Ok(FrechetRow { w2: opt.distance, lhs, pairing, violation, ratio, degenerate: opt.non_unique })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| a.w2.total_cmp(&b.w2));
    let pass = rows.iter().filter(|r| r.w2 > 0.0).take(2).all(|r| r.ratio <= tol);
    Ok(FrechetCertificate { t, rows, tolerance: tol, pass })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstancyReport {
    pub times: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Option<Vec<f64>>,
    /// `max_t |H_1(t) - H_1(tau)| / max(1, |H_1(tau)|)`.
    pub drift1: f64,
    pub drift2: Option<f64>,
}

impl ConstancyReport {
    /// CSV with columns `t, h1, h2`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "h1", "h2"])?;
        for (k, t) in self.times.iter().enumerate() {
            let h2 = self.h2.as_ref().map_or(f64::NAN, |h| h[k]);
            wr.serialize((t, self.h1[k], h2))?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn relative_drift(h: &[f64]) -> f64 {
    let h0 = h[0];
    h.iter().map(|v| (v - h0).abs()).fold(0.0, f64::max) / h0.abs().max(1.0)
}

/// `H_1(t) = sum_ik m_ik <r_i(t), D_x Phi(x_i)(z_k - x_i) + w(t, x_i)>` and
/// `H_2(t) = sum_i w_i <r_i(t), Psi(t, x_i)>` on the nodes from `tau` to `T`.
pub fn constancy_monitor(
    ensemble: &StateCostateEnsemble,
    plan_tau: &CouplingPlan,
    bundle: &LinearizationBundle,
) -> Result<ConstancyReport> {
    let base = &bundle.base_flow;
    if bundle.grid != ensemble.grid {
        return Err(Error::GridMismatch("bundle and ensemble use different grids".into()));
    }
    let k0 = base.tau_index();
    let misaligned = base
        .trajectories()
        .iter()
        .zip(&ensemble.x_paths)
        .skip(k0)
        .any(|(a, b)| a.iter().zip(b).any(|(x, y)| (x - y).norm() > 1e-9 * (1.0 + x.norm())));
    if misaligned {
        return Err(Error::GridMismatch("bundle base flow does not follow the ensemble states".into()));
    }
    let w = bundle
        .measure_dir
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("bundle lacks the measure derivative".into()))?;
    let m = base.base();
    if plan_tau.source().len() != m.len() {
        return Err(Error::MarginalMismatch("plan source differs from mu(tau)".into()));
    }
    let zs = plan_tau.target().atoms();
    let mut disp = vec![Point::zeros(m.dim()); m.len()];
    for (i, k, mass) in plan_tau.entries() {
        disp[i] += (&zs[k] - &m.atoms()[i]) * mass;
    }
    let nodes: Vec<usize> = (k0..=ensemble.grid.steps()).collect();
    let h1: Vec<f64> = nodes
        .iter()
        .map(|&k| {
            (0..m.len())
                .map(|i| {
                    let zeta = &bundle.space_jac[k][i] * &disp[i] + &w[k][i] * m.weights()[i];
                    ensemble.r_paths[k][i].dot(&zeta)
                })
                .sum()
        })
        .collect();
    let h2: Option<Vec<f64>> = bundle.time_dir.as_ref().map(|psi| {
        nodes
            .iter()
            .map(|&k| (0..m.len()).map(|i| m.weights()[i] * ensemble.r_paths[k][i].dot(&psi[k][i])).sum())
            .collect()
    });
    Ok(ConstancyReport {
        times: nodes.iter().map(|&k| ensemble.grid.node(k)).collect(),
        drift1: relative_drift(&h1),
        drift2: h2.as_deref().map(relative_drift),
        h1,
        h2,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PropagationRow {
    pub t: f64,
    pub direction: usize,
    /// Extrapolated derivative along `F`.
    pub d_plus: f64,
    /// `-d(-F)`, which equals `d(F)` exactly when the superdifferential is a
    /// singleton in that direction.
    pub d_minus: f64,
    pub gap: f64,
    pub symmetric_quotient: f64,
    pub pairing: f64,
    pub symmetric_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropagationReport {
    pub rows: Vec<PropagationRow>,
    pub tolerance: f64,
    pub holds_at_tau: bool,
    pub pass: bool,
}

/// If the one-sided derivatives agree with each other and with the costate
/// pairing at node `tau`, checks that they still do at every later node.
#[allow(clippy::too_many_arguments)]
pub fn subdifferential_propagation_check(
    ensemble: &StateCostateEnsemble,
    value: &dyn ValueHandle,
    tau: usize,
    nodes: &[usize],
    directions: &[Vec<Point>],
    eps: &[f64],
    tol: f64,
) -> Result<PropagationReport> {
    let mut all_nodes = vec![tau];
    all_nodes.extend(nodes.iter().copied().filter(|k| *k > tau));
    let jobs: Vec<(usize, usize)> = all_nodes.iter().flat_map(|&k| (0..directions.len()).map(move |d| (k, d))).collect();
    let e_min = eps.iter().copied().fold(f64::INFINITY, f64::min);
    let rows: Vec<PropagationRow> = jobs
        .par_iter()
        .map(|&(k, d)| {
            let t = ensemble.grid.node(k);
            let mu = ensemble.measure_at(k);
            let f = &directions[d];
            let neg: Vec<Point> = f.iter().map(|v| -v).collect();
            let qp = dini_quotients(value, t, &mu, 0.0, f, eps)?;
            let qm = dini_quotients(value, t, &mu, 0.0, &neg, eps)?;
            let d_plus = extrapolate(eps, &qp).0;
            let d_minus = -extrapolate(eps, &qm).0;
            let vp = value.value(t, &mu.displaced(f, e_min)?)?;
            let vm = value.value(t, &mu.displaced(f, -e_min)?)?;
            let symmetric_quotient = (vp - vm) / (2.0 * e_min);
            let pairing = ensemble.costate_pairing(k, f);
            Ok(PropagationRow {
                t,
                direction: d,
                d_plus,
                d_minus,
                gap: (d_plus - d_minus).abs(),
                symmetric_quotient,
                pairing,
                symmetric_gap: (symmetric_quotient - pairing).abs(),
            })
        })
        .collect::<Result<_>>()?;
    let ok = |r: &PropagationRow| r.gap <= tol && r.symmetric_gap <= tol;
    let t_tau = ensemble.grid.node(tau);
    let holds_at_tau = rows.iter().filter(|r| r.t == t_tau).all(ok);
    let pass = !holds_at_tau || rows.iter().all(ok);
    Ok(PropagationReport { rows, tolerance: tol, holds_at_tau, pass })
}
