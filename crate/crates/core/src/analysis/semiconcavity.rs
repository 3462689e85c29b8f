//! Concavity defects `(1 - l) f(mu_1) + l f(mu_2) - f(mu_l)` along
//! interpolations, normalised by the squared interpolation length.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::VelocityField;
use crate::flow::{integrate_flow, ControlSignal, TimeGrid};
use crate::measure::{CouplingPlan, EmpiricalMeasure};
use crate::transport::{coupled_trajectories, interpolate, plan_cost, w1, wasserstein};
use crate::value::ValueHandle;

use super::Functional;

#[derive(Debug, Clone, Serialize)]
pub struct DefectReport {
    pub scenario: String,
    pub lambdas: Vec<f64>,
    pub defects: Vec<f64>,
    pub normalizers: Vec<f64>,
    /// `max defect / normalizer` over samples with a positive normalizer; zero
    /// when there are none.
    pub fitted_constant: f64,
    /// Largest distance between a requested time and the grid node used.
    pub snap_distance: f64,
    pub pass: bool,
}

impl DefectReport {
    pub fn new(scenario: impl Into<String>, lambdas: Vec<f64>, defects: Vec<f64>, normalizers: Vec<f64>) -> Self {
        debug_assert_eq!(defects.len(), normalizers.len());
        let fitted = defects
            .iter()
            .zip(&normalizers)
            .filter(|(_, n)| **n > 0.0)
            .map(|(d, n)| d / n)
            .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
            .unwrap_or(0.0);
        Self {
            scenario: scenario.into(),
            lambdas,
            defects,
            normalizers,
            fitted_constant: fitted,
            snap_distance: 0.0,
            pass: fitted.is_finite(),
        }
    }

    /// Fails the report when the fitted constant exceeds `bound`.
    pub fn with_bound(mut self, bound: f64) -> Self {
        self.pass &= self.fitted_constant <= bound;
        self
    }

    /// CSV with columns `lambda, defect, normalizer, ratio`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["lambda", "defect", "normalizer", "ratio"])?;
        for ((l, d), n) in self.lambdas.iter().zip(&self.defects).zip(&self.normalizers) {
            let ratio = if *n > 0.0 { d / n } else { f64::NAN };
            wr.write_record([l.to_string(), d.to_string(), n.to_string(), ratio.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn defects_along(f: &Functional, plan: &CouplingPlan, lambdas: &[f64]) -> Result<Vec<f64>> {
    let f1 = f(plan.source())?;
    let f2 = f(plan.target())?;
    lambdas
        .par_iter()
        .map(|&l| Ok((1.0 - l) * f1 + l * f2 - f(&interpolate(plan, l)?)?))
        .collect()
}

fn check_marginals(plan: &CouplingPlan, m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Result<()> {
    let same = |a: &EmpiricalMeasure, b: &EmpiricalMeasure| {
        a.len() == b.len()
            && a.atoms().iter().zip(b.atoms()).all(|(x, y)| (x - y).norm() <= 1e-12)
            && a.weights().iter().zip(b.weights()).all(|(x, y)| (x - y).abs() <= 1e-12)
    };
    if !same(plan.source(), m1) || !same(plan.target(), m2) {
        return Err(Error::MarginalMismatch("plan marginals differ from the given measures".into()));
    }
    Ok(())
}

/// Defect along the `W_2`-geodesic, normalised by `l (1 - l) W_2^2`.
pub fn geodesic_semiconcavity_defect(
    f: &Functional,
    m1: &EmpiricalMeasure,
    m2: &EmpiricalMeasure,
    lambdas: &[f64],
) -> Result<DefectReport> {
    let opt = wasserstein(2, m1, m2)?;
    let w22 = opt.distance * opt.distance;
    let defects = defects_along(f, &opt.plan, lambdas)?;
    let normalizers = lambdas.iter().map(|l| l * (1.0 - l) * w22).collect();
    Ok(DefectReport::new("geodesic", lambdas.to_vec(), defects, normalizers))
}

/// Defect along an arbitrary plan, normalised by `l (1 - l) W_{2,plan}^2`.
pub fn strong_semiconcavity_defect(
    f: &Functional,
    m1: &EmpiricalMeasure,
    m2: &EmpiricalMeasure,
    plan: &CouplingPlan,
    lambdas: &[f64],
) -> Result<DefectReport> {
    check_marginals(plan, m1, m2)?;
    let c2 = plan_cost(plan).powi(2);
    let defects = defects_along(f, plan, lambdas)?;
    let normalizers = lambdas.iter().map(|l| l * (1.0 - l) * c2).collect();
    Ok(DefectReport::new("strong", lambdas.to_vec(), defects, normalizers))
}

/// Joint defect in `(tau, mu)`, with `tau_l` snapped to the nearest node of
/// `grid` and normaliser `l (1 - l) (|tau_1 - tau_2|^2 + W_{2,plan}^2)`.
#[allow(clippy::too_many_arguments)]
pub fn joint_semiconcavity_defect(
    value: &dyn ValueHandle,
    grid: &TimeGrid,
    (tau1, m1): (f64, &EmpiricalMeasure),
    (tau2, m2): (f64, &EmpiricalMeasure),
    plan: &CouplingPlan,
    lambdas: &[f64],
) -> Result<DefectReport> {
    if !value.time_regular() {
        return Err(Error::MissingMetadata("time-regularity of the field".into()));
    }
    check_marginals(plan, m1, m2)?;
    let v1 = value.value(tau1, m1)?;
    let v2 = value.value(tau2, m2)?;
    let c2 = plan_cost(plan).powi(2) + (tau1 - tau2).powi(2);
    let rows: Vec<(f64, f64)> = lambdas
        .par_iter()
        .map(|&l| {
            let t = (1.0 - l) * tau1 + l * tau2;
            let snapped = grid.node(grid.nearest_index(t));
            let v = value.value(snapped, &interpolate(plan, l)?)?;
            Ok(((1.0 - l) * v1 + l * v2 - v, (snapped - t).abs()))
        })
        .collect::<Result<_>>()?;
    let normalizers = lambdas.iter().map(|l| l * (1.0 - l) * c2).collect();
    let mut rep = DefectReport::new("joint", lambdas.to_vec(), rows.iter().map(|r| r.0).collect(), normalizers);
    rep.snap_distance = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(rep)
}

/// `max_t W_1(coupled interpolation at t, flow of the interpolation at t)`,
/// normalised by `l (1 - l) W_2^2(mu_1, mu_2)`.
pub fn interpolation_inequality_check(
    field: &dyn VelocityField,
    u: &ControlSignal,
    tau: f64,
    m1: &EmpiricalMeasure,
    m2: &EmpiricalMeasure,
    grid: &TimeGrid,
    lambdas: &[f64],
) -> Result<DefectReport> {
    let opt = wasserstein(2, m1, m2)?;
    let w22 = opt.distance * opt.distance;
    let f1 = integrate_flow(field, u, tau, m1, grid)?;
    let f2 = integrate_flow(field, u, tau, m2, grid)?;
    let coupled = coupled_trajectories(&opt.plan, &f1, &f2)?;
    let k0 = f1.tau_index();
    let defects: Vec<f64> = lambdas
        .par_iter()
        .map(|&l| {
            let start = interpolate(&opt.plan, l)?;
            let flow = integrate_flow(field, u, tau, &start, grid)?;
            let mut worst = 0.0f64;
            for (k, plan_t) in coupled.iter().enumerate().skip(k0) {
                worst = worst.max(w1(&interpolate(plan_t, l)?, &flow.measure_at(k))?);
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let normalizers = lambdas.iter().map(|l| l * (1.0 - l) * w22).collect();
    Ok(DefectReport::new("interpolation", lambdas.to_vec(), defects, normalizers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{builtin_cost, builtin_field, FinalCost};
    use crate::value::CostValue;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dvector, DVector};
    use serde_json::json;

    fn lambdas(n: usize) -> Vec<f64> {
        (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn quadratic_potential_has_unit_constant() {
        let c = builtin_cost("potential", &json!({"kind": "quadratic", "dim": 1})).unwrap();
        let f = |m: &EmpiricalMeasure| c.eval(m);
        let m1 = EmpiricalMeasure::from_1d(&[0.0, 1.0, 4.0], &[0.2, 0.3, 0.5]).unwrap();
        let m2 = EmpiricalMeasure::from_1d(&[-1.0, 2.5], &[0.6, 0.4]).unwrap();
        let rep = geodesic_semiconcavity_defect(&f, &m1, &m2, &lambdas(9)).unwrap();
        assert_abs_diff_eq!(rep.fitted_constant, 1.0, epsilon = 1e-9);
        assert_eq!(rep.defects[0], 0.0);
        assert_abs_diff_eq!(rep.defects[8], 0.0, epsilon = 1e-12);
        let prod = CouplingPlan::product(&m1, &m2).unwrap();
        let rep = strong_semiconcavity_defect(&f, &m1, &m2, &prod, &lambdas(9)).unwrap();
        assert_abs_diff_eq!(rep.fitted_constant, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn affine_potential_has_no_defect() {
        let c = builtin_cost("potential", &json!({"kind": "affine", "slope": [2.0], "offset": 1.0})).unwrap();
        let f = |m: &EmpiricalMeasure| c.eval(m);
        let m1 = EmpiricalMeasure::from_1d(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
        let m2 = EmpiricalMeasure::from_1d(&[3.0], &[1.0]).unwrap();
        let rep = geodesic_semiconcavity_defect(&f, &m1, &m2, &lambdas(5)).unwrap();
        assert!(rep.defects.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn diagonal_plan_and_symmetry() {
        let c = builtin_cost("interaction", &json!({"kind": "gaussian", "amplitude": 1.0, "width": 1.0})).unwrap();
        let f = |m: &EmpiricalMeasure| c.eval(m);
        let m = EmpiricalMeasure::from_1d(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
        let rep = strong_semiconcavity_defect(&f, &m, &m, &CouplingPlan::diagonal(&m), &lambdas(5)).unwrap();
        assert!(rep.defects.iter().all(|d| d.abs() < 1e-15));

        let m2 = EmpiricalMeasure::from_1d(&[0.5, 3.0], &[0.3, 0.7]).unwrap();
        let ls = [0.2, 0.5, 0.7];
        let a = geodesic_semiconcavity_defect(&f, &m, &m2, &ls).unwrap();
        let b = geodesic_semiconcavity_defect(&f, &m2, &m, &ls.map(|l| 1.0 - l)).unwrap();
        for (x, y) in a.defects.iter().zip(&b.defects) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn w2_to_target_constant_at_most_one() {
        let target = json!({"atoms": [[0.0, 0.0], [1.0, 2.0], [-1.0, 1.0]]});
        let c = builtin_cost("w2_squared_to_target", &target).unwrap();
        let f = |m: &EmpiricalMeasure| c.eval(m);
        let m1 = EmpiricalMeasure::uniform(vec![dvector![0.5, 0.0], dvector![2.0, 1.0], dvector![0.0, -1.0]]).unwrap();
        let m2 = EmpiricalMeasure::uniform(vec![dvector![-1.0, 2.0], dvector![1.0, 1.0], dvector![3.0, 0.0]]).unwrap();
        let rep = geodesic_semiconcavity_defect(&f, &m1, &m2, &lambdas(9)).unwrap().with_bound(1.0 + 1e-9);
        assert!(rep.pass, "{}", rep.fitted_constant);
    }

    #[test]
    fn marginal_mismatch_is_rejected() {
        let c = builtin_cost("potential", &json!({"kind": "quadratic", "dim": 1})).unwrap();
        let f = |m: &EmpiricalMeasure| c.eval(m);
        let m1 = EmpiricalMeasure::from_1d(&[0.0], &[1.0]).unwrap();
        let m2 = EmpiricalMeasure::from_1d(&[1.0], &[1.0]).unwrap();
        let plan = CouplingPlan::diagonal(&m1);
        assert!(matches!(strong_semiconcavity_defect(&f, &m1, &m2, &plan, &[0.5]), Err(Error::MarginalMismatch(_))));
    }

    #[test]
    fn joint_defect_reduces_to_measure_defect() {
        let c = builtin_cost("potential", &json!({"kind": "quadratic", "dim": 1})).unwrap();
        let v = CostValue { cost: &c, t0: 0.0, t1: 1.0 };
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let m1 = EmpiricalMeasure::from_1d(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
        let m2 = EmpiricalMeasure::from_1d(&[2.0, 3.0], &[0.5, 0.5]).unwrap();
        let plan = wasserstein(2, &m1, &m2).unwrap().plan;
        let rep = joint_semiconcavity_defect(&v, &g, (0.3, &m1), (0.3, &m2), &plan, &lambdas(5)).unwrap();
        assert_abs_diff_eq!(rep.fitted_constant, 1.0, epsilon = 1e-9);
        let rep = joint_semiconcavity_defect(&v, &g, (0.0, &m1), (0.5, &m2), &plan, &lambdas(5)).unwrap();
        assert!(rep.snap_distance > 0.0 && rep.fitted_constant < 1.0);
    }

    #[test]
    fn interpolation_inequality_on_linear_field() {
        let f = builtin_field("linear", &json!({"a": [[0.0, 1.0], [-1.0, 0.2]]})).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let u = ControlSignal::constant(g, DVector::zeros(0));
        let m1 = EmpiricalMeasure::uniform(vec![dvector![0.0, 0.0], dvector![1.0, 0.0]]).unwrap();
        let m2 = EmpiricalMeasure::uniform(vec![dvector![2.0, 1.0], dvector![0.0, 3.0]]).unwrap();
        let rep = interpolation_inequality_check(&f, &u, 0.0, &m1, &m2, &g, &lambdas(5)).unwrap();
        assert!(rep.defects.iter().all(|d| *d < 1e-12));
    }

    #[test]
    fn interpolation_inequality_on_interacting_field() {
        let f = builtin_field("convolution", &json!({"dim": 1, "kernel": "gaussian_gradient", "amplitude": 1.0, "width": 1.0})).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let u = ControlSignal::constant(g, DVector::zeros(0));
        let m1 = EmpiricalMeasure::from_1d(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
        let m2 = EmpiricalMeasure::from_1d(&[0.5, 2.0], &[0.5, 0.5]).unwrap();
        let rep = interpolation_inequality_check(&f, &u, 0.0, &m1, &m2, &g, &lambdas(5)).unwrap();
        assert!(rep.pass && rep.defects[0] < 1e-12 && rep.defects[4] < 1e-12);
        assert!(rep.defects[2] > 0.0);
    }
}
