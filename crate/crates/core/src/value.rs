//! Value function `V(tau, mu) = inf_u phi(mu_u(T))` by exhaustive enumeration
//! of piecewise-constant controls taking sample values on each control
//! interval.
//!
//! Controls are enumerated depth-first so that rollouts sharing a prefix share
//! its integration. A start time inside a control interval leaves the rest of
//! that interval free, so `V` can be queried at any time, not only at nodes.
//! Since only finitely many controls are tried, the estimate is an upper bound
//! of the continuous value.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{ControlSet, FinalCost, VelocityField};
use crate::flow::{flatten, integrate_flow, unflatten, ControlSignal, ParticleSystem, TimeGrid};
use crate::measure::{EmpiricalMeasure, Point};
use crate::ode::march;
use crate::transport::w1;

/// Default cap on the number of enumerated controls.
pub const DEFAULT_BUDGET: u128 = 100_000;

/// Tolerance for deciding that a value sequence is constant or nondecreasing.
pub const MONOTONICITY_TOL: f64 = 1e-9;

/// Anything that can be queried like a value function.
pub trait ValueHandle: Sync {
    fn value(&self, tau: f64, m: &EmpiricalMeasure) -> Result<f64>;
    fn horizon(&self) -> (f64, f64);
    /// The underlying field satisfies the time-regularity hypothesis needed
    /// for joint semiconcavity in `(tau, mu)`.
    fn time_regular(&self) -> bool;
}

/// A final cost seen as a time-independent value function.
pub struct CostValue<'a> {
    pub cost: &'a dyn FinalCost,
    pub t0: f64,
    pub t1: f64,
}

impl ValueHandle for CostValue<'_> {
    fn value(&self, _tau: f64, m: &EmpiricalMeasure) -> Result<f64> {
        self.cost.eval(m)
    }

    fn horizon(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }

    fn time_regular(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct ValueResult {
    pub value: f64,
    /// Minimising control on the control grid; intervals before `tau` repeat
    /// the first chosen sample.
    pub control: ControlSignal,
    /// Sample index per control interval from the one containing `tau`.
    pub encoding: Vec<usize>,
}

impl ValueResult {
    pub fn encoding_string(&self) -> String {
        self.encoding.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
    }
}

pub struct ExhaustiveValue<'a> {
    field: &'a dyn VelocityField,
    cost: &'a dyn FinalCost,
    grid: TimeGrid,
    control_grid: TimeGrid,
    samples: Vec<Point>,
    signals: Vec<ControlSignal>,
    budget: u128,
}

impl<'a> ExhaustiveValue<'a> {
    pub fn new(
        field: &'a dyn VelocityField,
        cost: &'a dyn FinalCost,
        grid: TimeGrid,
        control_grid: TimeGrid,
        set: &ControlSet,
    ) -> Result<Self> {
        set.validate()?;
        if set.dim() != field.control_dim() {
            return Err(Error::DimensionMismatch { expected: field.control_dim(), got: set.dim() });
        }
        if !control_grid.is_refined_by(&grid) {
            return Err(Error::GridMismatch("control switching nodes must be integration nodes".into()));
        }
        let samples = set.samples();
        let signals = samples.iter().map(|u| ControlSignal::constant(control_grid, u.clone())).collect();
        Ok(Self { field, cost, grid, control_grid, samples, signals, budget: DEFAULT_BUDGET })
    }

    pub fn with_budget(mut self, budget: u128) -> Self {
        self.budget = budget;
        self
    }

    pub fn field(&self) -> &'a dyn VelocityField {
        self.field
    }

    pub fn cost(&self) -> &'a dyn FinalCost {
        self.cost
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn control_grid(&self) -> &TimeGrid {
        &self.control_grid
    }

    pub fn samples(&self) -> &[Point] {
        &self.samples
    }

    /// Number of controls enumerated from `tau`.
    pub fn rollouts_from(&self, tau: f64) -> u128 {
        if self.at_horizon(tau) {
            return 1;
        }
        let n = self.control_grid.steps() - self.control_grid.interval_index(tau);
        (self.samples.len() as u128).saturating_pow(n as u32)
    }

    fn at_horizon(&self, tau: f64) -> bool {
        self.grid.index_of(tau) == Some(self.grid.steps())
    }

    /// Integration times from `a` to the end of control interval `c`.
    fn segment(&self, a: f64, c: usize) -> Vec<f64> {
        let end = self.grid.node(self.grid.index_of(self.control_grid.node(c + 1)).unwrap());
        self.grid.forward_times(a).into_iter().take_while(|t| *t <= end).collect()
    }

    fn search(&self, weights: &[f64], dim: usize, a: f64, c: usize, y: Vec<f64>) -> Result<(f64, Vec<usize>)> {
        if c == self.control_grid.steps() {
            let m = EmpiricalMeasure::from_parts_unchecked(dim, unflatten(&y, dim), weights.to_vec());
            return Ok((self.cost.eval(&m)?, Vec::new()));
        }
        let times = self.segment(a, c);
        let b = *times.last().unwrap();
        let sys = ParticleSystem { field: self.field, weights, dim };
        let child = |s: usize| -> Result<(f64, Vec<usize>)> {
            let states = march(&sys, &self.signals[s], &times, y.clone())?;
            let (v, mut path) = self.search(weights, dim, b, c + 1, states.into_iter().last().unwrap())?;
            path.insert(0, s);
            Ok((v, path))
        };
        let results: Vec<(f64, Vec<usize>)> = if self.samples.len() > 1 {
            (0..self.samples.len()).into_par_iter().map(child).collect::<Result<_>>()?
        } else {
            (0..self.samples.len()).map(child).collect::<Result<_>>()?
        };
        let mut best = results[0].clone();
        for r in results.into_iter().skip(1) {
            if r.0 < best.0 - 1e-12 * (1.0 + best.0.abs()) {
                best = r;
            }
        }
        Ok(best)
    }

    /// Minimum over all enumerated controls, with the lexicographically first
    /// minimiser.
    pub fn solve(&self, tau: f64, m: &EmpiricalMeasure) -> Result<ValueResult> {
        if m.dim() != self.field.dim() {
            return Err(Error::DimensionMismatch { expected: self.field.dim(), got: m.dim() });
        }
        if !self.grid.contains(tau) {
            return Err(Error::InvalidArgument(format!("tau = {tau} outside the horizon")));
        }
        let tau = tau.clamp(self.grid.t0(), self.grid.t1());
        if self.at_horizon(tau) {
            return Ok(ValueResult {
                value: self.cost.eval(m)?,
                control: self.signals[0].clone(),
                encoding: Vec::new(),
            });
        }
        let required = self.rollouts_from(tau);
        if required > self.budget {
            return Err(Error::BudgetExceeded { required, budget: self.budget });
        }
        let c0 = self.control_grid.interval_index(tau);
        let (value, encoding) = self.search(m.weights(), m.dim(), tau, c0, flatten(m.atoms()))?;
        let mut values: Vec<Point> = vec![self.samples[encoding[0]].clone(); c0];
        values.extend(encoding.iter().map(|&s| self.samples[s].clone()));
        Ok(ValueResult { value, control: ControlSignal::new(self.control_grid, values)?, encoding })
    }
}

impl ValueHandle for ExhaustiveValue<'_> {
    fn value(&self, tau: f64, m: &EmpiricalMeasure) -> Result<f64> {
        Ok(self.solve(tau, m)?.value)
    }

    fn horizon(&self) -> (f64, f64) {
        (self.grid.t0(), self.grid.t1())
    }

    fn time_regular(&self) -> bool {
        self.field.metadata(0.0).time_regular
    }
}

/// `V(tau, mu)` for a single query.
pub fn value_exhaustive(handle: &ExhaustiveValue, tau: f64, m: &EmpiricalMeasure) -> Result<ValueResult> {
    handle.solve(tau, m)
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityReport {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// No decrease beyond the tolerance.
    pub nondecreasing: bool,
    /// Constant within the tolerance, which characterises optimal pairs.
    pub constant: bool,
    pub tolerance: f64,
}

/// `t -> V(t, mu(t))` along the pair driven by `u` from `(tau, m)`, sampled at
/// `tau` and every later control node.
pub fn value_monotonicity_check(
    handle: &ExhaustiveValue,
    tau: f64,
    m: &EmpiricalMeasure,
    u: &ControlSignal,
) -> Result<MonotonicityReport> {
    let flow = integrate_flow(handle.field, u, tau, m, &handle.grid)?;
    let cg = handle.control_grid;
    let mut times = vec![flow.tau()];
    times.extend(cg.nodes().into_iter().filter(|t| *t > flow.tau() + 1e-12));
    let values: Vec<f64> = times
        .iter()
        .map(|t| {
            let k = handle.grid.index_of(*t).unwrap();
            handle.value(*t, &flow.measure_at(k))
        })
        .collect::<Result<_>>()?;
    let tol = MONOTONICITY_TOL;
    let nondecreasing = values.windows(2).all(|w| w[1] >= w[0] - tol * (1.0 + w[0].abs()));
    let constant = values.iter().all(|v| (v - values[0]).abs() <= tol * (1.0 + values[0].abs()));
    Ok(MonotonicityReport { times, values, nondecreasing, constant, tolerance: tol })
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzEstimate {
    /// Largest ratio over pairs at equal measures and distinct times.
    pub time_constant: f64,
    /// Largest ratio over pairs at equal times.
    pub measure_constant: f64,
    /// Largest ratio over all pairs.
    pub combined: f64,
    pub pairs: usize,
}

/// Ratios `|V(t1, m1) - V(t2, m2)| / (|t1 - t2| + W_1(m1, m2))` over all pairs
/// of `queries` at positive distance.
pub fn lipschitz_probe(handle: &dyn ValueHandle, queries: &[(f64, EmpiricalMeasure)]) -> Result<LipschitzEstimate> {
    let values: Vec<f64> = queries.par_iter().map(|(t, m)| handle.value(*t, m)).collect::<Result<_>>()?;
    let mut est = LipschitzEstimate { time_constant: 0.0, measure_constant: 0.0, combined: 0.0, pairs: 0 };
    for a in 0..queries.len() {
        for b in a + 1..queries.len() {
            let dt = (queries[a].0 - queries[b].0).abs();
            let dm = w1(&queries[a].1, &queries[b].1)?;
            if dt + dm <= 0.0 {
                continue;
            }
            let ratio = (values[a] - values[b]).abs() / (dt + dm);
            est.pairs += 1;
            est.combined = est.combined.max(ratio);
            if dm <= 1e-15 {
                est.time_constant = est.time_constant.max(ratio);
            }
            if dt <= 1e-15 {
                est.measure_constant = est.measure_constant.max(ratio);
            }
        }
    }
    Ok(est)
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueRow {
    pub tau: f64,
    pub measure_id: usize,
    pub value: f64,
    pub argmin_control_encoding: String,
}

/// CSV with columns `tau, measure_id, value, argmin_control_encoding`.
pub fn write_value_table<W: Write>(rows: &[ValueRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    if rows.is_empty() {
        wr.write_record(["tau", "measure_id", "value", "argmin_control_encoding"])?;
    }
    wr.flush()?;
    Ok(())
}
