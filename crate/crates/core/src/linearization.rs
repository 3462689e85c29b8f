//! First-order variations of non-local flows.
//!
//! Three linearised systems are integrated along a base flow started at node
//! `tau`:
//!
//! - the space Jacobian `W_i(t) = D_x Phi_{(tau,t)}[mu](x_i)`, `W_i(tau) = Id`;
//! - the measure derivative `w_i(t)` along a coupling `(x_j, z_k)`, `w(tau) = 0`,
//!   driven by `sum_jk mass_jk D_mu v(x_i)(x_j) (W_j (z_k - x_j) + w_j)`;
//! - the initial-time derivative `Psi_i(t)`, `Psi_i(tau) = -v(tau, mu, u, x_i)`.
//!
//! The base particles are carried in the same state vector and stepped by the
//! same RK4 scheme on the same grid, so the linearisations see exactly the
//! discrete base trajectory at every node.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::VelocityField;
use crate::flow::{flatten, flow_forward_from, ControlSignal, FlowSolution, ParticleSystem, TimeGrid};
use crate::measure::{CouplingPlan, EmpiricalMeasure, Point};
use crate::ode::{march, OdeSystem};
use crate::transport::interpolate;

struct Augmented<'a> {
    particles: ParticleSystem<'a>,
    /// `sum_k mass_jk (z_k - x_j)` per source atom, when the measure
    /// derivative is requested.
    displacement: Option<&'a [Point]>,
    with_jac: bool,
    with_time: bool,
}

struct Layout {
    n: usize,
    d: usize,
    jac: Option<usize>,
    meas: Option<usize>,
    time: Option<usize>,
    len: usize,
}

impl Augmented<'_> {
    fn layout(&self) -> Layout {
        let n = self.particles.weights.len();
        let d = self.particles.dim;
        let mut off = n * d;
        let mut take = |on: bool, size: usize| {
            on.then(|| {
                let o = off;
                off += size;
                o
            })
        };
        let jac = take(self.with_jac, n * d * d);
        let meas = take(self.displacement.is_some(), n * d);
        let time = take(self.with_time, n * d);
        Layout { n, d, jac, meas, time, len: off }
    }
}

fn vec_at(y: &[f64], off: usize, i: usize, d: usize) -> DVector<f64> {
    DVector::from_column_slice(&y[off + i * d..off + (i + 1) * d])
}

fn mat_at(y: &[f64], off: usize, i: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(d, d, &y[off + i * d * d..off + (i + 1) * d * d])
}

impl OdeSystem for Augmented<'_> {
    fn rhs(&self, t: f64, u: &Point, y: &[f64]) -> Vec<f64> {
        let l = self.layout();
        let (n, d) = (l.n, l.d);
        let field = self.particles.field;
        let mut out = vec![0.0; l.len];
        let xs_flat = &y[..n * d];
        out[..n * d].copy_from_slice(&self.particles.velocities(t, u, xs_flat));
        let mu = self.particles.measure(xs_flat);
        let xs = mu.atoms();
        let jx: Vec<DMatrix<f64>> = xs.iter().map(|x| field.jac_x(t, &mu, u, x)).collect();
        let nonlocal = !field.is_local();
        // D_mu v(x_i)(x_j), row-major in (i, j)
        let kernel: Vec<DMatrix<f64>> = if nonlocal && (l.meas.is_some() || l.time.is_some()) {
            let mu = &mu;
            xs.iter().flat_map(|xi| xs.iter().map(move |xj| field.grad_mu(t, mu, u, xi, xj))).collect()
        } else {
            Vec::new()
        };

        if let Some(o) = l.jac {
            for i in 0..n {
                let w = &jx[i] * mat_at(y, o, i, d);
                out[o + i * d * d..o + (i + 1) * d * d].copy_from_slice(w.as_slice());
            }
        }
        if let (Some(o), Some(disp), Some(oj)) = (l.meas, self.displacement, l.jac) {
            let source: Vec<DVector<f64>> = (0..n)
                .map(|j| mat_at(y, oj, j, d) * &disp[j] + vec_at(y, o, j, d) * mu.weights()[j])
                .collect();
            for i in 0..n {
                let mut dw = &jx[i] * vec_at(y, o, i, d);
                if nonlocal {
                    for (j, s) in source.iter().enumerate() {
                        dw += &kernel[i * n + j] * s;
                    }
                }
                out[o + i * d..o + (i + 1) * d].copy_from_slice(dw.as_slice());
            }
        }
        if let Some(o) = l.time {
            let psi: Vec<DVector<f64>> = (0..n).map(|j| vec_at(y, o, j, d)).collect();
            for i in 0..n {
                let mut dp = &jx[i] * &psi[i];
                if nonlocal {
                    for (j, p) in psi.iter().enumerate() {
                        dp += &kernel[i * n + j] * p * mu.weights()[j];
                    }
                }
                out[o + i * d..o + (i + 1) * d].copy_from_slice(dp.as_slice());
            }
        }
        out
    }
}

/// Paths of a linearised quantity: `paths[k][i]` at node `k` for atom `i`.
pub type VectorPaths = Vec<Vec<Point>>;
pub type MatrixPaths = Vec<Vec<DMatrix<f64>>>;

#[derive(Debug, Clone)]
pub struct LinearizationBundle {
    pub grid: TimeGrid,
    pub space_jac: MatrixPaths,
    pub measure_dir: Option<VectorPaths>,
    pub time_dir: Option<VectorPaths>,
    pub base_flow: FlowSolution,
    pub plan: Option<CouplingPlan>,
}

fn plan_displacement(base: &EmpiricalMeasure, plan: &CouplingPlan) -> Result<Vec<Point>> {
    let src = plan.source();
    if src.len() != base.len()
        || src.weights().iter().zip(base.weights()).any(|(a, b)| (a - b).abs() > 1e-12)
        || src.atoms().iter().zip(base.atoms()).any(|(a, b)| (a - b).norm() > 1e-12)
    {
        return Err(Error::MarginalMismatch("plan source differs from the base measure".into()));
    }
    let zs = plan.target().atoms();
    let mut disp = vec![DVector::zeros(base.dim()); base.len()];
    for (j, k, m) in plan.entries() {
        disp[j] += (&zs[k] - &base.atoms()[j]) * m;
    }
    Ok(disp)
}

fn check_time_derivative(base: &FlowSolution) -> Result<()> {
    let tau = base.tau();
    let k = base.tau_index();
    if k == 0 || k == base.grid().steps() {
        return Err(Error::InvalidArgument(format!("tau = {tau} is not an interior node")));
    }
    if base.control().is_jump(tau) {
        return Err(Error::NotLebesguePoint { t: tau });
    }
    Ok(())
}

fn run(
    base: &FlowSolution,
    field: &dyn VelocityField,
    plan: Option<&CouplingPlan>,
    with_time: bool,
) -> Result<LinearizationBundle> {
    let m = base.base();
    let (n, d) = (m.len(), m.dim());
    if field.dim() != d {
        return Err(Error::DimensionMismatch { expected: field.dim(), got: d });
    }
    let disp = plan.map(|p| plan_displacement(m, p)).transpose()?;
    if with_time {
        check_time_derivative(base)?;
    }
    let sys = Augmented {
        particles: ParticleSystem { field, weights: m.weights(), dim: d },
        displacement: disp.as_deref(),
        with_jac: true,
        with_time,
    };
    let l = sys.layout();
    let grid = *base.grid();
    let k0 = base.tau_index();
    let tau = base.tau();
    let u = base.control();

    let init = |forward: bool| -> Vec<f64> {
        let mut y = flatten(m.atoms());
        let id = DMatrix::<f64>::identity(d, d);
        for _ in 0..n {
            y.extend(id.iter());
        }
        if disp.is_some() {
            y.extend(std::iter::repeat_n(0.0, n * d));
        }
        if with_time {
            // right (forward) or left (backward) limit of the control at tau
            let h = grid.step();
            let uu = u.value_at(if forward { tau + 0.5 * h } else { tau - 0.5 * h });
            for x in m.atoms() {
                y.extend((-field.eval(tau, m, uu, x)).iter());
            }
        }
        y
    };

    let nodes = grid.nodes();
    let fwd = march(&sys, u, &nodes[k0..], init(true))?;
    let back_times: Vec<f64> = nodes[..=k0].iter().rev().copied().collect();
    let bwd = march(&sys, u, &back_times, init(false))?;
    let states: Vec<Vec<f64>> = bwd.into_iter().rev().chain(fwd.into_iter().skip(1)).collect();

    let space_jac = states.iter().map(|y| (0..n).map(|i| mat_at(y, l.jac.unwrap(), i, d)).collect()).collect();
    let measure_dir = l.meas.map(|o| states.iter().map(|y| (0..n).map(|i| vec_at(y, o, i, d)).collect()).collect());
    let time_dir = l.time.map(|o| states.iter().map(|y| (0..n).map(|i| vec_at(y, o, i, d)).collect()).collect());
    Ok(LinearizationBundle {
        grid,
        space_jac,
        measure_dir,
        time_dir,
        base_flow: base.clone(),
        plan: plan.cloned(),
    })
}

impl LinearizationBundle {
    /// All three linearisations; the time derivative is included only when
    /// `tau` is an interior node where the control is continuous.
    pub fn compute(base: &FlowSolution, field: &dyn VelocityField, plan: Option<&CouplingPlan>) -> Result<Self> {
        let with_time = check_time_derivative(base).is_ok();
        run(base, field, plan, with_time)
    }

    /// `max_{t, i} |w_i(t)|`.
    pub fn measure_dir_sup(&self) -> Option<f64> {
        self.measure_dir.as_ref().map(|p| p.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max))
    }
}

/// `D_x Phi_{(tau,t)}[mu](x_i)` at every node.
pub fn space_jacobian(base: &FlowSolution, field: &dyn VelocityField) -> Result<MatrixPaths> {
    Ok(run(base, field, None, false)?.space_jac)
}

/// Derivative of the flow in the direction of `plan`.
pub fn measure_derivative(base: &FlowSolution, field: &dyn VelocityField, plan: &CouplingPlan) -> Result<VectorPaths> {
    Ok(run(base, field, Some(plan), false)?.measure_dir.unwrap())
}

/// Derivative of the flow with respect to its initial time.
pub fn time_derivative(base: &FlowSolution, field: &dyn VelocityField) -> Result<VectorPaths> {
    Ok(run(base, field, None, true)?.time_dir.unwrap())
}

/// Combined perturbation for [`taylor_residual`]: tracers start at
/// `x_i + eps dy_i`, the measure moves by `eps` along `plan`, the initial time
/// moves by `eps dh`.
#[derive(Debug, Clone, Default)]
pub struct Perturbation {
    pub dy: Option<Vec<Point>>,
    pub plan: Option<CouplingPlan>,
    pub dh: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResidualRow {
    pub epsilon: f64,
    pub residual: f64,
    /// Slope against the previous row; `NaN` on the first.
    pub slope_estimate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualTable {
    pub rows: Vec<ResidualRow>,
    /// Least-squares slope of `log residual` against `log epsilon`.
    pub fitted_slope: f64,
}

impl ResidualTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epsilon", "residual", "slope_estimate"])?;
        for r in &self.rows {
            wr.write_record([r.epsilon.to_string(), r.residual.to_string(), r.slope_estimate.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `nu_eps` for the measure part of a perturbation.
fn perturbed_measure(base: &EmpiricalMeasure, plan: Option<&CouplingPlan>, eps: f64) -> Result<EmpiricalMeasure> {
    let Some(plan) = plan else {
        return Ok(base.clone());
    };
    if plan.is_deterministic() {
        let zs = plan.target().atoms();
        let mut atoms = base.atoms().to_vec();
        for (j, k, _) in plan.entries() {
            atoms[j] = &base.atoms()[j] + (&zs[k] - &base.atoms()[j]) * eps;
        }
        base.with_atoms(atoms)
    } else {
        interpolate(plan, eps)
    }
}

/// `max_{t,i} |Phi_{(tau + eps dh, t)}[nu_eps](x_i + eps dy_i) - prediction|` at
/// one `eps`, over nodes after both initial times.
fn residual_at(
    base: &FlowSolution,
    field: &dyn VelocityField,
    bundle: &LinearizationBundle,
    pert: &Perturbation,
    eps: f64,
) -> Result<f64> {
    let m = base.base();
    let tau = base.tau();
    let start = tau + eps * pert.dh;
    let grid = base.grid();
    let nu = perturbed_measure(m, pert.plan.as_ref(), eps)?;
    let tracers: Vec<Point> = match &pert.dy {
        Some(dy) => m.atoms().iter().zip(dy).map(|(x, d)| x + d * eps).collect(),
        None => m.atoms().to_vec(),
    };
    let (times, _, tr) = flow_forward_from(field, base.control(), start, &nu, &tracers, grid)?;
    let mut worst = 0.0f64;
    for (t, pts) in times.iter().zip(&tr) {
        let Some(k) = grid.index_of(*t) else { continue };
        if k < base.tau_index() {
            continue;
        }
        for (i, p) in pts.iter().enumerate() {
            let mut pred = base.atoms_at(k)[i].clone();
            if let Some(dy) = &pert.dy {
                pred += &bundle.space_jac[k][i] * &dy[i] * eps;
            }
            if let Some(w) = &bundle.measure_dir {
                pred += &w[k][i] * eps;
            }
            if pert.dh != 0.0 {
                pred += &bundle.time_dir.as_ref().unwrap()[k][i] * (eps * pert.dh);
            }
            worst = worst.max((p - pred).norm());
        }
    }
    Ok(worst)
}

fn check_perturbation(base: &FlowSolution, pert: &Perturbation) -> Result<()> {
    if let Some(dy) = &pert.dy {
        if dy.len() != base.base().len() || dy.iter().any(|v| v.len() != base.base().dim()) {
            return Err(Error::InvalidArgument("space perturbation must give one vector per atom".into()));
        }
    }
    if pert.dh != 0.0 {
        check_time_derivative(base)?;
    }
    Ok(())
}

/// Remainder of the total first-order expansion of the flow, per `eps`.
pub fn taylor_residual(
    base: &FlowSolution,
    field: &dyn VelocityField,
    pert: &Perturbation,
    epsilons: &[f64],
) -> Result<ResidualTable> {
    check_perturbation(base, pert)?;
    let bundle = run(base, field, pert.plan.as_ref(), pert.dh != 0.0)?;
    let residuals: Vec<f64> = epsilons
        .par_iter()
        .map(|&e| residual_at(base, field, &bundle, pert, e))
        .collect::<Result<_>>()?;
    let rows: Vec<ResidualRow> = epsilons
        .iter()
        .zip(&residuals)
        .enumerate()
        .map(|(k, (&e, &r))| ResidualRow {
            epsilon: e,
            residual: r,
            slope_estimate: if k == 0 { f64::NAN } else { (r / residuals[k - 1]).ln() / (e / epsilons[k - 1]).ln() },
        })
        .collect();
    Ok(ResidualTable { fitted_slope: loglog_slope(epsilons, &residuals), rows })
}

/// `max |(Phi[perturbed] - Phi[base]) / eps - derivative|`.
pub fn finite_difference_mismatch(
    base: &FlowSolution,
    field: &dyn VelocityField,
    pert: &Perturbation,
    eps: f64,
) -> Result<f64> {
    check_perturbation(base, pert)?;
    let bundle = run(base, field, pert.plan.as_ref(), pert.dh != 0.0)?;
    Ok(residual_at(base, field, &bundle, pert, eps)? / eps)
}

pub(crate) fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Convenience: base flow plus a constant-control signal on the same grid.
pub fn base_flow(
    field: &dyn VelocityField,
    control: &ControlSignal,
    tau: f64,
    m: &EmpiricalMeasure,
    grid: &TimeGrid,
) -> Result<FlowSolution> {
    crate::flow::integrate_flow(field, control, tau, m, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::builtin_field;
    use crate::flow::integrate_flow;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dvector, Matrix2};
    use serde_json::json;

    fn rot_exp(t: f64) -> Matrix2<f64> {
        // exp(t [[0,1],[-1,0]])
        Matrix2::new(t.cos(), t.sin(), -t.sin(), t.cos())
    }

    fn setup(name: &str, params: serde_json::Value, m: &EmpiricalMeasure, tau: f64, steps: usize) -> (crate::fields::BuiltinField, FlowSolution) {
        let f = builtin_field(name, &params).unwrap();
        let g = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let u = ControlSignal::constant(g, DVector::zeros(0));
        let sol = integrate_flow(&f, &u, tau, m, &g).unwrap();
        (f, sol)
    }

    #[test]
    fn zero_field_linearisations() {
        let m = EmpiricalMeasure::uniform(vec![dvector![1.0], dvector![3.0]]).unwrap();
        let (f, sol) = setup("zero", json!({"dim": 1}), &m, 0.5, 10);
        for k in space_jacobian(&sol, &f).unwrap() {
            for w in k {
                assert_eq!(w[(0, 0)], 1.0);
            }
        }
        for k in time_derivative(&sol, &f).unwrap() {
            for p in k {
                assert_eq!(p[0], 0.0);
            }
        }
    }

    #[test]
    fn rotation_jacobian_is_matrix_exponential() {
        let m = EmpiricalMeasure::dirac(dvector![1.0, 0.5]);
        let (f, sol) = setup("linear", json!({"a": [[0.0, 1.0], [-1.0, 0.0]]}), &m, 0.25, 1000);
        let jac = space_jacobian(&sol, &f).unwrap();
        for (k, t) in sol.grid().nodes().iter().enumerate() {
            let e = rot_exp(t - 0.25);
            for r in 0..2 {
                for c in 0..2 {
                    assert_abs_diff_eq!(jac[k][0][(r, c)], e[(r, c)], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn mean_attraction_jacobian_decays() {
        let m = EmpiricalMeasure::from_1d(&[0.0, 2.0], &[0.5, 0.5]).unwrap();
        let (f, sol) = setup("mean_attraction", json!({"dim": 1}), &m, 0.0, 1000);
        let jac = space_jacobian(&sol, &f).unwrap();
        for (k, t) in sol.grid().nodes().iter().enumerate() {
            assert_abs_diff_eq!(jac[k][1][(0, 0)], (-t).exp(), epsilon = 1e-6);
        }
    }

    #[test]
    fn measure_derivative_vanishes_on_diagonal_and_local_fields() {
        let m = EmpiricalMeasure::from_1d(&[0.0, 2.0], &[0.5, 0.5]).unwrap();
        let (f, sol) = setup("mean_attraction", json!({"dim": 1}), &m, 0.0, 100);
        let w = measure_derivative(&sol, &f, &CouplingPlan::diagonal(&m)).unwrap();
        assert!(w.iter().flatten().all(|v| v[0] == 0.0));

        let (f, sol) = setup("linear", json!({"a": [[0.5]]}), &m, 0.0, 100);
        let plan = CouplingPlan::deterministic(&m, |x| x * 2.0).unwrap();
        let w = measure_derivative(&sol, &f, &plan).unwrap();
        assert!(w.iter().flatten().all(|v| v[0] == 0.0));
    }

    #[test]
    fn measure_derivative_rejects_foreign_plan() {
        let m = EmpiricalMeasure::from_1d(&[0.0, 2.0], &[0.5, 0.5]).unwrap();
        let other = EmpiricalMeasure::from_1d(&[0.0, 2.5], &[0.5, 0.5]).unwrap();
        let (f, sol) = setup("mean_attraction", json!({"dim": 1}), &m, 0.0, 10);
        let plan = CouplingPlan::diagonal(&other);
        assert!(matches!(measure_derivative(&sol, &f, &plan), Err(Error::MarginalMismatch(_))));
    }

    #[test]
    fn constant_field_time_derivative() {
        // v = B u with a constant control behaves like a constant field c
        let m = EmpiricalMeasure::dirac(dvector![0.0, 0.0]);
        let f = builtin_field("linear", &json!({"a": [[0.0, 0.0], [0.0, 0.0]], "b": [[1.0], [2.0]]})).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let u = ControlSignal::constant(g, dvector![1.5]);
        let sol = integrate_flow(&f, &u, 0.5, &m, &g).unwrap();
        for k in time_derivative(&sol, &f).unwrap() {
            assert_abs_diff_eq!(k[0][0], -1.5, epsilon = 1e-15);
            assert_abs_diff_eq!(k[0][1], -3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn linear_time_derivative_closed_form() {
        let x0 = dvector![1.0, 0.5];
        let m = EmpiricalMeasure::dirac(x0.clone());
        let (f, sol) = setup("linear", json!({"a": [[0.0, 1.0], [-1.0, 0.0]]}), &m, 0.5, 1000);
        let psi = time_derivative(&sol, &f).unwrap();
        let a = Matrix2::new(0.0, 1.0, -1.0, 0.0);
        let x = nalgebra::Vector2::new(x0[0], x0[1]);
        for (k, t) in sol.grid().nodes().iter().enumerate() {
            let expect = -(rot_exp(t - 0.5) * a * x);
            assert_abs_diff_eq!(psi[k][0][0], expect[0], epsilon = 1e-6);
            assert_abs_diff_eq!(psi[k][0][1], expect[1], epsilon = 1e-6);
        }
    }

    #[test]
    fn time_derivative_needs_lebesgue_point() {
        let f = builtin_field("constant_control", &json!({"dim": 1})).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let cg = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let u = ControlSignal::new(cg, vec![dvector![1.0], dvector![-1.0]]).unwrap();
        let m = EmpiricalMeasure::dirac(dvector![0.0]);
        let sol = integrate_flow(&f, &u, 0.5, &m, &g).unwrap();
        assert!(matches!(time_derivative(&sol, &f), Err(Error::NotLebesguePoint { .. })));
        let sol = integrate_flow(&f, &u, 0.0, &m, &g).unwrap();
        assert!(time_derivative(&sol, &f).is_err());
    }

    #[test]
    fn zero_perturbation_has_zero_residual() {
        let m = EmpiricalMeasure::from_1d(&[0.0, 2.0], &[0.5, 0.5]).unwrap();
        let (f, sol) = setup("mean_attraction", json!({"dim": 1}), &m, 0.5, 100);
        let table = taylor_residual(&sol, &f, &Perturbation::default(), &[0.1, 0.01]).unwrap();
        assert!(table.rows.iter().all(|r| r.residual == 0.0));
    }

    #[test]
    fn linear_field_space_residual_is_roundoff() {
        let m = EmpiricalMeasure::dirac(dvector![1.0, 0.0]);
        let (f, sol) = setup("linear", json!({"a": [[0.0, 1.0], [-1.0, 0.0]]}), &m, 0.0, 200);
        let pert = Perturbation { dy: Some(vec![dvector![0.3, -0.7]]), ..Default::default() };
        let table = taylor_residual(&sol, &f, &pert, &[0.1, 0.01, 0.001]).unwrap();
        assert!(table.rows.iter().all(|r| r.residual < 1e-12), "{table:?}");
    }

    #[test]
    fn residual_csv_header() {
        let table = ResidualTable {
            rows: vec![ResidualRow { epsilon: 0.1, residual: 1e-3, slope_estimate: f64::NAN }],
            fitted_slope: f64::NAN,
        };
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("epsilon,residual,slope_estimate\n"));
    }
}
