//! Exact discrete optimal transport between empirical measures.

mod simplex;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::FlowSolution;
use crate::measure::{CouplingPlan, EmpiricalMeasure, Point};

#[derive(Debug, Clone)]
pub struct TransportResult {
    pub distance: f64,
    pub plan: CouplingPlan,
    pub order: u32,
    /// The optimal vertex has zero-flow basic cells.
    pub degenerate: bool,
    /// Another optimal plan was found adjacent to the returned one; the
    /// returned plan is the solver's deterministic choice.
    pub non_unique: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TransportFlags {
    pub degenerate: bool,
    pub non_unique: bool,
}

impl TransportResult {
    pub fn flags(&self) -> TransportFlags {
        TransportFlags { degenerate: self.degenerate, non_unique: self.non_unique }
    }
}

fn cost_matrix(p: u32, m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> DMatrix<f64> {
    DMatrix::from_fn(m1.len(), m2.len(), |i, j| {
        let d = (&m1.atoms()[i] - &m2.atoms()[j]).norm();
        if p == 1 {
            d
        } else {
            d * d
        }
    })
}

/// `W_p(m1, m2)` for `p` in `{1, 2}` with an optimal vertex plan.
pub fn wasserstein(p: u32, m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Result<TransportResult> {
    if m1.dim() != m2.dim() {
        return Err(Error::DimensionMismatch { expected: m1.dim(), got: m2.dim() });
    }
    if p != 1 && p != 2 {
        return Err(Error::InvalidArgument(format!("unsupported transport order {p}")));
    }
    let cost = cost_matrix(p, m1, m2);
    let sol = simplex::solve(m1.weights(), m2.weights(), &cost)?;
    let total: f64 = sol.flow.component_mul(&cost).sum().max(0.0);
    let distance = if p == 1 { total } else { total.sqrt() };
    Ok(TransportResult {
        distance,
        plan: CouplingPlan::from_parts_unchecked(m1.clone(), m2.clone(), sol.flow),
        order: p,
        degenerate: sol.degenerate,
        non_unique: sol.non_unique,
    })
}

/// `W_1` only.
pub fn w1(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Result<f64> {
    Ok(wasserstein(1, m1, m2)?.distance)
}

/// `W_2` only.
pub fn w2(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure) -> Result<f64> {
    Ok(wasserstein(2, m1, m2)?.distance)
}

/// `int phi d(m1 - m2)` for a witness that is 1-Lipschitz on the union of the
/// supports, which makes it a lower bound for `W_1(m1, m2)`.
pub fn kantorovich_lower_bound<F>(m1: &EmpiricalMeasure, m2: &EmpiricalMeasure, witness: F) -> Result<f64>
where
    F: Fn(&Point) -> f64,
{
    if m1.dim() != m2.dim() {
        return Err(Error::DimensionMismatch { expected: m1.dim(), got: m2.dim() });
    }
    let pts: Vec<&Point> = m1.atoms().iter().chain(m2.atoms()).collect();
    let vals: Vec<f64> = pts.iter().map(|p| witness(p)).collect();
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let gap = (vals[i] - vals[j]).abs();
            let dist = (pts[i] - pts[j]).norm();
            if gap > dist * (1.0 + 1e-12) + 1e-12 {
                return Err(Error::NotLipschitz { i, j, gap, dist });
            }
        }
    }
    let n = m1.len();
    let a: f64 = m1.weights().iter().zip(&vals[..n]).map(|(w, v)| w * v).sum();
    let b: f64 = m2.weights().iter().zip(&vals[n..]).map(|(w, v)| w * v).sum();
    Ok(a - b)
}

/// `((1 - lambda) pi^1 + lambda pi^2)_# plan`, one atom per positive entry in
/// row-major order.
pub fn interpolate(plan: &CouplingPlan, lambda: f64) -> Result<EmpiricalMeasure> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda = {lambda} outside [0, 1]")));
    }
    let xs = plan.source().atoms();
    let ys = plan.target().atoms();
    let (atoms, weights): (Vec<Point>, Vec<f64>) = plan
        .entries()
        .map(|(i, j, m)| (&xs[i] * (1.0 - lambda) + &ys[j] * lambda, m))
        .unzip();
    let total: f64 = weights.iter().sum();
    // entries inherit the plan's marginal tolerance; renormalise the rounding only
    let weights = weights.into_iter().map(|w| w / total).collect();
    EmpiricalMeasure::new(atoms, weights)
}

/// `(sum_ij mass_ij |x_i - y_j|^2)^(1/2)`.
pub fn plan_cost(plan: &CouplingPlan) -> f64 {
    let xs = plan.source().atoms();
    let ys = plan.target().atoms();
    plan.entries().map(|(i, j, m)| m * (&xs[i] - &ys[j]).norm_squared()).sum::<f64>().sqrt()
}

/// Moves every plan entry `(i, j)` along the two flows, keeping its mass.
/// Returns one plan per grid node.
pub fn coupled_trajectories(plan: &CouplingPlan, flow1: &FlowSolution, flow2: &FlowSolution) -> Result<Vec<CouplingPlan>> {
    if flow1.grid() != flow2.grid() {
        return Err(Error::GridMismatch("coupled flows live on different grids".into()));
    }
    if flow1.base().len() != plan.source().len() || flow2.base().len() != plan.target().len() {
        return Err(Error::MarginalMismatch("flow bases do not match the plan marginals".into()));
    }
    (0..flow1.grid().nodes().len())
        .map(|k| {
            let src = flow1.measure_at(k);
            let tgt = flow2.measure_at(k);
            Ok(CouplingPlan::from_parts_unchecked(src, tgt, plan.mass().clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    #[test]
    fn two_diracs() {
        let a = dvector![1.0, 2.0];
        let b = dvector![4.0, -2.0];
        let r = wasserstein(2, &EmpiricalMeasure::dirac(a), &EmpiricalMeasure::dirac(b)).unwrap();
        assert_abs_diff_eq!(r.distance, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn monotone_matching_in_1d() {
        let mu = EmpiricalMeasure::from_1d(&[0.0, 2.0], &[0.5, 0.5]).unwrap();
        let nu = EmpiricalMeasure::from_1d(&[1.0, 3.0], &[0.5, 0.5]).unwrap();
        let r = wasserstein(2, &mu, &nu).unwrap();
        // crossed matching would cost sqrt(0.5 * 1 + 0.5 * 9) = sqrt(5)
        assert_abs_diff_eq!(r.distance, 1.0, epsilon = 1e-12);
        assert_eq!(r.plan.mass()[(0, 0)], 0.5);
        assert_eq!(r.plan.mass()[(1, 1)], 0.5);
    }

    #[test]
    fn self_distance_is_zero_with_diagonal_plan() {
        let mu = EmpiricalMeasure::from_1d(&[0.0, 2.0, 5.0], &[0.2, 0.3, 0.5]).unwrap();
        let r = wasserstein(1, &mu, &mu).unwrap();
        assert_eq!(r.distance, 0.0);
        assert_eq!(r.plan.mass(), CouplingPlan::diagonal(&mu).mass());
    }

    #[test]
    fn rejects_mismatch() {
        let a = EmpiricalMeasure::dirac(dvector![0.0]);
        let b = EmpiricalMeasure::dirac(dvector![0.0, 0.0]);
        assert!(matches!(wasserstein(2, &a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(wasserstein(3, &a, &a).is_err());
    }

    #[test]
    fn kantorovich_examples() {
        let mu = EmpiricalMeasure::dirac(dvector![2.0]);
        let nu = EmpiricalMeasure::dirac(dvector![0.0]);
        assert_eq!(kantorovich_lower_bound(&mu, &nu, |_| 0.0).unwrap(), 0.0);
        assert_eq!(kantorovich_lower_bound(&mu, &nu, |x| x[0]).unwrap(), 2.0);
        assert_eq!(kantorovich_lower_bound(&mu, &nu, |x| -x[0]).unwrap(), -2.0);
        assert_abs_diff_eq!(w1(&mu, &nu).unwrap(), 2.0);
        assert!(matches!(
            kantorovich_lower_bound(&mu, &nu, |x| 2.0 * x[0]),
            Err(Error::NotLipschitz { .. })
        ));
    }

    #[test]
    fn interpolation_examples() {
        let mu = EmpiricalMeasure::from_1d(&[0.0, 2.0], &[0.5, 0.5]).unwrap();
        let nu = EmpiricalMeasure::from_1d(&[1.0, 3.0], &[0.5, 0.5]).unwrap();
        let plan = wasserstein(2, &mu, &nu).unwrap().plan;
        let mid = interpolate(&plan, 0.5).unwrap();
        assert_eq!(mid.atoms(), &[dvector![0.5], dvector![2.5]]);
        assert_eq!(mid.weights(), &[0.5, 0.5]);
        assert_eq!(interpolate(&plan, 0.0).unwrap().atoms(), mu.atoms());
        assert_eq!(interpolate(&plan, 1.0).unwrap().atoms(), nu.atoms());
        assert!(interpolate(&plan, 1.5).is_err());

        let prod = CouplingPlan::product(&mu, &nu).unwrap();
        let start = interpolate(&prod, 0.0).unwrap();
        assert_eq!(start.len(), 4);
        assert_abs_diff_eq!(start.mean()[0], mu.mean()[0], epsilon = 1e-15);
    }

    #[test]
    fn plan_cost_examples() {
        let mu = EmpiricalMeasure::from_1d(&[0.0, 2.0], &[0.5, 0.5]).unwrap();
        assert_eq!(plan_cost(&CouplingPlan::diagonal(&mu)), 0.0);
        let d0 = EmpiricalMeasure::dirac(dvector![0.0]);
        let d3 = EmpiricalMeasure::dirac(dvector![3.0]);
        assert_abs_diff_eq!(plan_cost(&CouplingPlan::product(&d0, &d3).unwrap()), 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(plan_cost(&CouplingPlan::product(&mu, &mu).unwrap()), 2f64.sqrt(), epsilon = 1e-15);
    }
}
