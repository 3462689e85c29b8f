//! Pontryagin maximum principle in particle form.
//!
//! The state-costate measure `nu(t) = sum_i w_i delta_{(x_i(t), r_i(t))}` keeps
//! Dirac conditionals, so the backward dynamics reduces to the particle system
//!
//! ```text
//! r_i' = -D_x v(x_i)^T r_i - sum_j w_j D_mu v(x_j)(x_i)^T r_j,
//! r_i(T) = -grad phi(mu(T))(x_i(T)).
//! ```

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{ControlSet, FinalCost, VelocityField};
use crate::flow::{flatten, integrate_flow, unflatten, ControlSignal, FlowSolution, TimeGrid};
use crate::measure::{EmpiricalMeasure, Point};
use crate::ode::{march, OdeSystem};

/// `sum_i w_i <r_i, v(t, mu, u, x_i)>`.
pub fn hamiltonian(field: &dyn VelocityField, t: f64, mu: &EmpiricalMeasure, r: &[Point], u: &Point) -> f64 {
    mu.atoms()
        .iter()
        .zip(mu.weights())
        .zip(r)
        .map(|((x, w), r)| w * r.dot(&field.eval(t, mu, u, x)))
        .sum()
}

/// Per-atom `(x-slot, r-slot)` of the Wasserstein gradient of the Hamiltonian:
/// `(D_x v(x_i)^T r_i + sum_j w_j D_mu v(x_j)(x_i)^T r_j, v(x_i))`.
pub fn hamiltonian_gradient(
    field: &dyn VelocityField,
    t: f64,
    mu: &EmpiricalMeasure,
    r: &[Point],
    u: &Point,
) -> Vec<(Point, Point)> {
    let xs = mu.atoms();
    let local = field.is_local();
    xs.iter()
        .zip(r)
        .map(|(xi, ri)| {
            let mut gx = field.jac_x(t, mu, u, xi).transpose() * ri;
            if !local {
                for ((xj, wj), rj) in xs.iter().zip(mu.weights()).zip(r) {
                    gx += field.grad_mu(t, mu, u, xj, xi).transpose() * rj * *wj;
                }
            }
            (gx, field.eval(t, mu, u, xi))
        })
        .collect()
}

/// States and costates marched backward together from the terminal time.
struct CostateSystem<'a> {
    field: &'a dyn VelocityField,
    weights: &'a [f64],
    dim: usize,
}

impl OdeSystem for CostateSystem<'_> {
    fn rhs(&self, t: f64, u: &Point, y: &[f64]) -> Vec<f64> {
        let nd = self.weights.len() * self.dim;
        let xs = unflatten(&y[..nd], self.dim);
        let rs = unflatten(&y[nd..], self.dim);
        let mu = EmpiricalMeasure::from_parts_unchecked(self.dim, xs, self.weights.to_vec());
        let grad = hamiltonian_gradient(self.field, t, &mu, &rs, u);
        let mut out = Vec::with_capacity(2 * nd);
        out.extend(grad.iter().flat_map(|(_, v)| v.iter().copied()));
        out.extend(grad.iter().flat_map(|(g, _)| g.iter().map(|c| -c)));
        out
    }
}

#[derive(Debug, Clone)]
pub struct StateCostateEnsemble {
    pub grid: TimeGrid,
    pub weights: Vec<f64>,
    /// `x_paths[k][i]`: state of particle `i` at node `k`.
    pub x_paths: Vec<Vec<Point>>,
    pub r_paths: Vec<Vec<Point>>,
    pub control: ControlSignal,
}

impl StateCostateEnsemble {
    pub fn dim(&self) -> usize {
        self.x_paths[0][0].len()
    }

    pub fn measure_at(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::from_parts_unchecked(self.dim(), self.x_paths[k].clone(), self.weights.clone())
    }

    /// Control acting right after node `k` (on the last interval at `T`).
    pub fn control_at(&self, k: usize) -> &Point {
        self.control.value_at(self.grid.node(k))
    }

    /// `H(t_k, nu(t_k), u)`.
    pub fn hamiltonian_at(&self, field: &dyn VelocityField, k: usize, u: &Point) -> f64 {
        hamiltonian(field, self.grid.node(k), &self.measure_at(k), &self.r_paths[k], u)
    }

    /// `H(t_k, nu(t_k), u(t_k))` along the ensemble's own control.
    pub fn optimal_hamiltonian(&self, field: &dyn VelocityField, k: usize) -> f64 {
        self.hamiltonian_at(field, k, self.control_at(k))
    }

    /// `sum_i w_i <-r_i(t_k), f_i>`.
    pub fn costate_pairing(&self, k: usize, f: &[Point]) -> f64 {
        self.r_paths[k].iter().zip(&self.weights).zip(f).map(|((r, w), f)| -w * r.dot(f)).sum()
    }

    /// CSV with columns `t, atom_index, x_1..x_d, r_1..r_d`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.dim();
        let mut header = vec!["t".to_string(), "atom_index".to_string()];
        header.extend((1..=d).map(|k| format!("x_{k}")));
        header.extend((1..=d).map(|k| format!("r_{k}")));
        wr.write_record(&header)?;
        for (k, (xs, rs)) in self.x_paths.iter().zip(&self.r_paths).enumerate() {
            for (i, (x, r)) in xs.iter().zip(rs).enumerate() {
                let mut rec = vec![self.grid.node(k).to_string(), i.to_string()];
                rec.extend(x.iter().chain(r.iter()).map(|c| c.to_string()));
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Costates along `base`, from `r_i(T) = -grad phi(mu(T))(x_i(T))` back to
/// the first grid node.
pub fn integrate_costate(
    base: &FlowSolution,
    field: &dyn VelocityField,
    cost: &dyn FinalCost,
) -> Result<StateCostateEnsemble> {
    let grid = *base.grid();
    let m = base.base();
    let d = m.dim();
    let terminal = base.terminal();
    let rt: Vec<Point> = cost.wgrad(&terminal)?.into_iter().map(|g| -g).collect();
    let mut y0 = flatten(terminal.atoms());
    y0.extend(flatten(&rt));
    let sys = CostateSystem { field, weights: m.weights(), dim: d };
    let times: Vec<f64> = grid.nodes().into_iter().rev().collect();
    let states = march(&sys, base.control(), &times, y0)?;
    let nd = m.len() * d;
    let r_paths = states.iter().rev().map(|s| unflatten(&s[nd..], d)).collect();
    Ok(StateCostateEnsemble {
        grid,
        weights: m.weights().to_vec(),
        x_paths: base.trajectories().to_vec(),
        r_paths,
        control: base.control().clone(),
    })
}

/// `max_{u in samples} H(t_k, nu, u) - H(t_k, nu, u(t_k))` at every node.
pub fn check_maximisation(
    ensemble: &StateCostateEnsemble,
    field: &dyn VelocityField,
    samples: &[Point],
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty control sample set".into()));
    }
    Ok((0..=ensemble.grid.steps())
        .into_par_iter()
        .map(|k| {
            let h_star = ensemble.optimal_hamiltonian(field, k);
            let best = samples.iter().map(|u| ensemble.hamiltonian_at(field, k, u)).fold(f64::NEG_INFINITY, f64::max);
            (best - h_star).max(0.0)
        })
        .collect())
}

/// `max_{t, i} |r_i(t)| / bound(t)` with the Gronwall bound
/// `exp(int_t^T |D_x v| + |D_mu v|) * max_i |r_i(T)|`. At most one (up to
/// quadrature error) when the costates respect the bound.
pub fn costate_bound_ratio(ensemble: &StateCostateEnsemble, field: &dyn VelocityField) -> f64 {
    let grid = &ensemble.grid;
    let rates: Vec<f64> = (0..=grid.steps())
        .map(|k| {
            let t = grid.node(k);
            let mu = ensemble.measure_at(k);
            let u = ensemble.control_at(k);
            let xs = mu.atoms();
            let jx = xs.iter().map(|x| field.jac_x(t, &mu, u, x).norm()).fold(0.0, f64::max);
            let kmu = if field.is_local() {
                0.0
            } else {
                xs.iter()
                    .flat_map(|x| xs.iter().map(move |y| (x, y)))
                    .map(|(x, y)| field.grad_mu(t, &mu, u, x, y).norm())
                    .fold(0.0, f64::max)
            };
            jx + kmu
        })
        .collect();
    let n = grid.steps();
    let rt = ensemble.r_paths[n].iter().map(|r| r.norm()).fold(0.0, f64::max);
    let mut integral = 0.0;
    let mut worst = 0.0f64;
    for k in (0..=n).rev() {
        if k < n {
            integral += 0.5 * grid.step() * (rates[k] + rates[k + 1]);
        }
        let bound = integral.exp() * rt;
        let rmax = ensemble.r_paths[k].iter().map(|r| r.norm()).fold(0.0, f64::max);
        if bound > 0.0 {
            worst = worst.max(rmax / bound);
        } else if rmax > 0.0 {
            return f64::INFINITY;
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepParams {
    pub damping: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self { damping: 0.5, max_iterations: 200, tolerance: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub ensemble: StateCostateEnsemble,
    pub converged: bool,
    pub iterations: usize,
}

/// Sample maximising the trapezoidal integral of `H` over control interval
/// `c`; ties keep `current` when it is among the maximisers.
fn interval_argmax(
    ensemble: &StateCostateEnsemble,
    field: &dyn VelocityField,
    control_grid: &TimeGrid,
    c: usize,
    samples: &[Point],
    current: &Point,
) -> Point {
    let grid = &ensemble.grid;
    let ka = grid.index_of(control_grid.node(c)).unwrap();
    let kb = grid.index_of(control_grid.node(c + 1)).unwrap();
    let score = |u: &Point| -> f64 {
        (ka..kb)
            .map(|k| 0.5 * (ensemble.hamiltonian_at(field, k, u) + ensemble.hamiltonian_at(field, k + 1, u)))
            .sum()
    };
    let scores: Vec<f64> = samples.par_iter().map(score).collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tie = 1e-12 * (1.0 + best.abs());
    let winners: Vec<&Point> = samples.iter().zip(&scores).filter(|(_, s)| **s >= best - tie).map(|(u, _)| u).collect();
    winners
        .iter()
        .find(|u| (**u - current).norm() < 1e-12)
        .copied()
        .unwrap_or(winners[0])
        .clone()
}

/// Forward flow, backward costate, damped pointwise Hamiltonian maximisation,
/// repeated until the control stops moving. The returned ensemble uses the
/// last maximising samples, so its control lies in the sample set even when
/// damping left the iterate strictly inside the hull.
#[allow(clippy::too_many_arguments)]
pub fn forward_backward_sweep(
    field: &dyn VelocityField,
    cost: &dyn FinalCost,
    m0: &EmpiricalMeasure,
    grid: &TimeGrid,
    control_grid: &TimeGrid,
    control_set: &ControlSet,
    initial: Option<&ControlSignal>,
    params: &SweepParams,
) -> Result<SweepResult> {
    let samples = control_set.samples();
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty control sample set".into()));
    }
    let mut u = match initial {
        Some(u) => u.clone(),
        None => {
            let start = samples.iter().min_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap().clone();
            ControlSignal::constant(*control_grid, start)
        }
    };
    if u.grid() != control_grid {
        return Err(Error::GridMismatch("initial control must live on the control grid".into()));
    }
    let tau = grid.t0();
    let mut converged = false;
    let mut iterations = 0;
    let mut targets: Vec<Point> = u.values().to_vec();
    while iterations < params.max_iterations {
        iterations += 1;
        let flow = integrate_flow(field, &u, tau, m0, grid)?;
        let ens = integrate_costate(&flow, field, cost)?;
        targets = (0..control_grid.steps())
            .map(|c| interval_argmax(&ens, field, control_grid, c, &samples, &u.values()[c]))
            .collect();
        let next: Vec<Point> = u
            .values()
            .iter()
            .zip(&targets)
            .map(|(a, b)| a + (b - a) * params.damping)
            .collect();
        let change = u.values().iter().zip(&next).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        u = ControlSignal::new(*control_grid, next)?;
        if change < params.tolerance {
            converged = true;
            break;
        }
    }
    let snapped = ControlSignal::new(*control_grid, targets)?;
    let flow = integrate_flow(field, &snapped, tau, m0, grid)?;
    let ensemble = integrate_costate(&flow, field, cost)?;
    Ok(SweepResult { ensemble, converged, iterations })
}

/// `|r_i(T) + grad phi(mu(T))(x_i(T))|`, maximised over atoms.
pub fn terminal_costate_gap(ensemble: &StateCostateEnsemble, cost: &dyn FinalCost) -> Result<f64> {
    let n = ensemble.grid.steps();
    let g = cost.wgrad(&ensemble.measure_at(n))?;
    Ok(ensemble.r_paths[n].iter().zip(&g).map(|(r, g)| (r + g).norm()).fold(0.0, f64::max))
}

/// `max_k |H(t_k) - H(t_0)|` along the ensemble's own control.
pub fn hamiltonian_drift(ensemble: &StateCostateEnsemble, field: &dyn VelocityField) -> f64 {
    let h0 = ensemble.optimal_hamiltonian(field, 0);
    (0..=ensemble.grid.steps()).map(|k| (ensemble.optimal_hamiltonian(field, k) - h0).abs()).fold(0.0, f64::max)
}

/// Gradient of `m -> phi(flow(m)(T))` with respect to each initial atom by
/// central differences; used to cross-check `w_i r_i(0)`.
pub fn reduced_cost_gradient(
    field: &dyn VelocityField,
    cost: &dyn FinalCost,
    u: &ControlSignal,
    m: &EmpiricalMeasure,
    grid: &TimeGrid,
    step: f64,
) -> Result<Vec<Point>> {
    let d = m.dim();
    let phi = |atoms: Vec<Point>| -> Result<f64> {
        let mm = m.with_atoms(atoms)?;
        cost.eval(&crate::flow::terminal_measure(field, u, grid.t0(), &mm, grid)?)
    };
    (0..m.len())
        .map(|i| {
            let mut g = DVector::zeros(d);
            for c in 0..d {
                let mut plus = m.atoms().to_vec();
                let mut minus = m.atoms().to_vec();
                plus[i][c] += step;
                minus[i][c] -= step;
                g[c] = (phi(plus)? - phi(minus)?) / (2.0 * step);
            }
            Ok(g)
        })
        .collect()
}

/// `max_i |w_i r_i(0) + grad_{x_i(0)} phi(flow)|`.
pub fn adjoint_gradient_gap(
    ensemble: &StateCostateEnsemble,
    field: &dyn VelocityField,
    cost: &dyn FinalCost,
    step: f64,
) -> Result<f64> {
    let m0 = ensemble.measure_at(0);
    let fd = reduced_cost_gradient(field, cost, &ensemble.control, &m0, &ensemble.grid, step)?;
    Ok(ensemble.r_paths[0]
        .iter()
        .zip(&ensemble.weights)
        .zip(&fd)
        .map(|((r, w), g)| (r * *w + g).norm())
        .fold(0.0, f64::max))
}
