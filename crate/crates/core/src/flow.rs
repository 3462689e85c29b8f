//! Non-local flows: the coupled particle system
//! `x_i' = v(t, mu_N(t), u(t), x_i)` with `mu_N(t) = sum_j w_j delta_{x_j(t)}`,
//! integrated forward and backward from an initial node.

use std::io::Write;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fields::{ControlSet, VelocityField};
use crate::measure::{EmpiricalMeasure, Point};
use crate::ode::{march, OdeSystem};

/// Uniform partition of `[t0, t1]` into `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t1: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(t0 < t1) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::InvalidArgument(format!("bad grid [{t0}, {t1}] with {steps} steps")));
        }
        Ok(Self { t0, t1, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    fn snap_tol(&self) -> f64 {
        1e-9 * self.step()
    }

    /// Index of the node equal to `t` up to rounding.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = (t - self.t0) / self.step();
        let k = x.round();
        if k < 0.0 || k > self.steps as f64 {
            return None;
        }
        ((self.node(k as usize) - t).abs() <= self.snap_tol()).then_some(k as usize)
    }

    pub fn nearest_index(&self, t: f64) -> usize {
        (((t - self.t0) / self.step()).round().max(0.0) as usize).min(self.steps)
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t0 - self.snap_tol() && t <= self.t1 + self.snap_tol()
    }

    /// Every node of `self` is a node of `fine`.
    pub fn is_refined_by(&self, fine: &TimeGrid) -> bool {
        (self.t0 - fine.t0).abs() <= fine.snap_tol()
            && (self.t1 - fine.t1).abs() <= fine.snap_tol()
            && fine.steps.is_multiple_of(self.steps)
    }

    /// Interval containing `t`, right-continuous; `t1` belongs to the last one.
    pub fn interval_index(&self, t: f64) -> usize {
        if let Some(k) = self.index_of(t) {
            return k.min(self.steps - 1);
        }
        (((t - self.t0) / self.step()).floor().max(0.0) as usize).min(self.steps - 1)
    }

    /// `t` followed by every node strictly after it, up to `t1`.
    pub fn forward_times(&self, t: f64) -> Vec<f64> {
        let mut out = vec![t];
        if let Some(k) = self.index_of(t) {
            out[0] = self.node(k);
            out.extend((k + 1..=self.steps).map(|j| self.node(j)));
        } else {
            let k = ((t - self.t0) / self.step()).floor() as usize + 1;
            out.extend((k..=self.steps).map(|j| self.node(j)));
        }
        out
    }
}

/// Piecewise-constant open-loop control: one value per interval of its own
/// (coarse) grid, right-continuous at the switching nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    grid: TimeGrid,
    values: Vec<Point>,
}

impl ControlSignal {
    pub fn new(grid: TimeGrid, values: Vec<Point>) -> Result<Self> {
        if values.len() != grid.steps() {
            return Err(Error::InvalidArgument(format!(
                "{} control values for {} intervals",
                values.len(),
                grid.steps()
            )));
        }
        let m = values[0].len();
        if values.iter().any(|v| v.len() != m) {
            return Err(Error::InvalidArgument("control values of mixed dimension".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: TimeGrid, u: Point) -> Self {
        Self { grid, values: vec![u; grid.steps()] }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[Point] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn interval_index(&self, t: f64) -> usize {
        self.grid.interval_index(t)
    }

    pub fn value_at(&self, t: f64) -> &Point {
        &self.values[self.interval_index(t)]
    }

    /// `t` is an interior switching node where the value actually changes.
    pub fn is_jump(&self, t: f64) -> bool {
        match self.grid.index_of(t) {
            Some(k) if k > 0 && k < self.grid.steps() => (&self.values[k] - &self.values[k - 1]).norm() > 0.0,
            _ => false,
        }
    }

    pub fn validate_in(&self, set: &ControlSet) -> Result<()> {
        for v in &self.values {
            if !set.contains(v) {
                return Err(Error::InvalidArgument(format!("control value {:?} outside the control set", v.as_slice())));
            }
        }
        Ok(())
    }

    pub(crate) fn check_dims(&self, field: &dyn VelocityField) -> Result<()> {
        if self.dim() != field.control_dim() {
            return Err(Error::DimensionMismatch { expected: field.control_dim(), got: self.dim() });
        }
        Ok(())
    }
}

/// Particle system with optional passive tracers carried by the same field.
pub(crate) struct ParticleSystem<'a> {
    pub field: &'a dyn VelocityField,
    pub weights: &'a [f64],
    pub dim: usize,
}

impl ParticleSystem<'_> {
    pub fn measure(&self, y: &[f64]) -> EmpiricalMeasure {
        let n = self.weights.len();
        let atoms = (0..n).map(|i| DVector::from_column_slice(&y[i * self.dim..(i + 1) * self.dim])).collect();
        EmpiricalMeasure::from_parts_unchecked(self.dim, atoms, self.weights.to_vec())
    }

    pub fn velocities(&self, t: f64, u: &Point, y: &[f64]) -> Vec<f64> {
        let mu = self.measure(y);
        let mut out = Vec::with_capacity(y.len());
        for p in y.chunks(self.dim) {
            let x = DVector::from_column_slice(p);
            out.extend(self.field.eval(t, &mu, u, &x).iter());
        }
        out
    }
}

impl OdeSystem for ParticleSystem<'_> {
    fn rhs(&self, t: f64, u: &Point, y: &[f64]) -> Vec<f64> {
        self.velocities(t, u, y)
    }
}

pub(crate) fn flatten(points: &[Point]) -> Vec<f64> {
    points.iter().flat_map(|p| p.iter().copied()).collect()
}

pub(crate) fn unflatten(y: &[f64], dim: usize) -> Vec<Point> {
    y.chunks(dim).map(DVector::from_column_slice).collect()
}

fn check_inputs(field: &dyn VelocityField, u: &ControlSignal, m: &EmpiricalMeasure, grid: &TimeGrid) -> Result<()> {
    if m.dim() != field.dim() {
        return Err(Error::DimensionMismatch { expected: field.dim(), got: m.dim() });
    }
    u.check_dims(field)?;
    if !u.grid().is_refined_by(grid) {
        return Err(Error::GridMismatch("control switching nodes must be integration nodes".into()));
    }
    Ok(())
}

/// Times, particle atoms and tracer positions at each time.
pub type ForwardTrace = (Vec<f64>, Vec<Vec<Point>>, Vec<Vec<Point>>);

/// Trajectories of the particles of `m` and of `tracers` started at time
/// `start` (any time in the grid) and marched forward through the remaining
/// grid nodes. Returns `(times, particle atoms, tracer positions)` per time.
pub fn flow_forward_from(
    field: &dyn VelocityField,
    u: &ControlSignal,
    start: f64,
    m: &EmpiricalMeasure,
    tracers: &[Point],
    grid: &TimeGrid,
) -> Result<ForwardTrace> {
    check_inputs(field, u, m, grid)?;
    if !grid.contains(start) {
        return Err(Error::InvalidArgument(format!("start time {start} outside the grid")));
    }
    let sys = ParticleSystem { field, weights: m.weights(), dim: m.dim() };
    let times = grid.forward_times(start.clamp(grid.t0(), grid.t1()));
    let mut y0 = flatten(m.atoms());
    y0.extend(flatten(tracers));
    let states = march(&sys, u, &times, y0)?;
    let n = m.len() * m.dim();
    let (parts, tr) = states
        .into_iter()
        .map(|s| (unflatten(&s[..n], m.dim()), unflatten(&s[n..], m.dim())))
        .unzip();
    Ok((times, parts, tr))
}

/// Final measure `mu(T)` started from `(start, m)`.
pub fn terminal_measure(
    field: &dyn VelocityField,
    u: &ControlSignal,
    start: f64,
    m: &EmpiricalMeasure,
    grid: &TimeGrid,
) -> Result<EmpiricalMeasure> {
    let (_, parts, _) = flow_forward_from(field, u, start, m, &[], grid)?;
    m.with_atoms(parts.into_iter().last().unwrap())
}

#[derive(Debug, Clone)]
pub struct FlowSolution {
    grid: TimeGrid,
    tau_index: usize,
    base: EmpiricalMeasure,
    /// `trajectories[k][i]` is particle `i` at node `k`.
    trajectories: Vec<Vec<Point>>,
    control: ControlSignal,
}

impl FlowSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn tau_index(&self) -> usize {
        self.tau_index
    }

    pub fn tau(&self) -> f64 {
        self.grid.node(self.tau_index)
    }

    pub fn base(&self) -> &EmpiricalMeasure {
        &self.base
    }

    pub fn control(&self) -> &ControlSignal {
        &self.control
    }

    pub fn atoms_at(&self, k: usize) -> &[Point] {
        &self.trajectories[k]
    }

    pub fn trajectories(&self) -> &[Vec<Point>] {
        &self.trajectories
    }

    pub fn measure_at(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::from_parts_unchecked(self.base.dim(), self.trajectories[k].clone(), self.base.weights().to_vec())
    }

    pub fn terminal(&self) -> EmpiricalMeasure {
        self.measure_at(self.grid.steps())
    }

    pub fn max_support_radius(&self) -> f64 {
        self.trajectories.iter().flatten().map(|p| p.norm()).fold(0.0, f64::max)
    }

    /// CSV with columns `t, atom_index, x_1..x_d`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.base.dim();
        let mut header = vec!["t".to_string(), "atom_index".to_string()];
        header.extend((1..=d).map(|k| format!("x_{k}")));
        wr.write_record(&header)?;
        for (k, atoms) in self.trajectories.iter().enumerate() {
            for (i, x) in atoms.iter().enumerate() {
                let mut rec = vec![format!("{}", self.grid.node(k)), i.to_string()];
                rec.extend(x.iter().map(|c| format!("{c}")));
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// `Phi_{(tau, t)}[m]` at every grid node: forward for `t >= tau`, backward for
/// `t <= tau`.
pub fn integrate_flow(
    field: &dyn VelocityField,
    u: &ControlSignal,
    tau: f64,
    m: &EmpiricalMeasure,
    grid: &TimeGrid,
) -> Result<FlowSolution> {
    check_inputs(field, u, m, grid)?;
    let k0 = grid.index_of(tau).ok_or_else(|| Error::InvalidArgument(format!("tau = {tau} is not a grid node")))?;
    let sys = ParticleSystem { field, weights: m.weights(), dim: m.dim() };
    let nodes = grid.nodes();
    let y0 = flatten(m.atoms());
    let fwd = march(&sys, u, &nodes[k0..], y0.clone())?;
    let back_times: Vec<f64> = nodes[..=k0].iter().rev().copied().collect();
    let bwd = march(&sys, u, &back_times, y0)?;
    let mut trajectories = Vec::with_capacity(nodes.len());
    trajectories.extend(bwd.into_iter().rev().map(|s| unflatten(&s, m.dim())));
    trajectories.extend(fwd.into_iter().skip(1).map(|s| unflatten(&s, m.dim())));
    Ok(FlowSolution { grid: *grid, tau_index: k0, base: m.clone(), trajectories, control: u.clone() })
}

/// `max_i |Phi_{(s,t)}[mu(s)](Phi_{(tau,s)}[mu](x_i)) - Phi_{(tau,t)}[mu](x_i)|`.
pub fn semigroup_check(
    field: &dyn VelocityField,
    u: &ControlSignal,
    tau: f64,
    s: f64,
    t: f64,
    m: &EmpiricalMeasure,
    grid: &TimeGrid,
) -> Result<f64> {
    let node = |x: f64| grid.index_of(x).ok_or_else(|| Error::InvalidArgument(format!("{x} is not a grid node")));
    let (ks, kt) = (node(s)?, node(t)?);
    let first = integrate_flow(field, u, tau, m, grid)?;
    let second = integrate_flow(field, u, s, &first.measure_at(ks), grid)?;
    Ok(second
        .atoms_at(kt)
        .iter()
        .zip(first.atoms_at(kt))
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max))
}

/// `R_r = (r + |m|_1)(1 + T exp(2 |m|_1))`.
pub fn apriori_radius(m_l1: f64, r: f64, horizon: f64) -> f64 {
    (r + m_l1) * (1.0 + horizon * (2.0 * m_l1).exp())
}

/// [`apriori_radius`] with `|m|_1 = m * T` from a field's (time-constant)
/// sublinearity constant.
pub fn apriori_radius_for(field: &dyn VelocityField, control_radius: f64, r: f64, horizon: f64) -> Result<f64> {
    let m = field
        .metadata(control_radius)
        .sublinearity
        .ok_or_else(|| Error::MissingMetadata(format!("sublinearity constant of `{}`", field.name())))?;
    Ok(apriori_radius(m * horizon, r, horizon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::builtin_field;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;
    use serde_json::json;

    fn no_control(grid: TimeGrid) -> ControlSignal {
        ControlSignal::constant(grid, DVector::zeros(0))
    }

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.index_of(0.5), Some(2));
        assert_eq!(g.index_of(0.3), None);
        assert_eq!(g.forward_times(0.3), vec![0.3, 0.5, 0.75, 1.0]);
        assert_eq!(g.forward_times(0.75), vec![0.75, 1.0]);
        assert!(TimeGrid::new(1.0, 0.0, 3).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 2).unwrap().is_refined_by(&g));
        assert!(!TimeGrid::new(0.0, 1.0, 3).unwrap().is_refined_by(&g));
    }

    #[test]
    fn control_lookup_and_jumps() {
        let g = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let u = ControlSignal::new(g, vec![dvector![1.0], dvector![-1.0]]).unwrap();
        assert_eq!(u.value_at(0.2)[0], 1.0);
        assert_eq!(u.value_at(0.5)[0], -1.0);
        assert_eq!(u.value_at(1.0)[0], -1.0);
        assert!(u.is_jump(0.5));
        assert!(!u.is_jump(0.0));
        assert!(ControlSignal::new(g, vec![dvector![1.0]]).is_err());
    }

    #[test]
    fn zero_field_is_stationary() {
        let f = builtin_field("zero", &json!({"dim": 2})).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let m = EmpiricalMeasure::uniform(vec![dvector![1.0, 2.0], dvector![-1.0, 0.5]]).unwrap();
        let sol = integrate_flow(&f, &no_control(g), 0.5, &m, &g).unwrap();
        for k in 0..=10 {
            assert_eq!(sol.atoms_at(k), m.atoms());
        }
        assert_eq!(semigroup_check(&f, &no_control(g), 0.0, 0.3, 1.0, &m, &g).unwrap(), 0.0);
    }

    #[test]
    fn rotation_matches_closed_form() {
        let f = builtin_field("linear", &json!({"a": [[0.0, 1.0], [-1.0, 0.0]]})).unwrap();
        let g = TimeGrid::new(0.0, std::f64::consts::FRAC_PI_2, 1571).unwrap();
        let m = EmpiricalMeasure::dirac(dvector![1.0, 0.0]);
        let sol = integrate_flow(&f, &no_control(g), 0.0, &m, &g).unwrap();
        let end = sol.terminal().atoms()[0].clone();
        assert_abs_diff_eq!(end[0], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(end[1], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn backward_integration_inverts_forward() {
        let f = builtin_field("mean_attraction", &json!({"dim": 1})).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let m = EmpiricalMeasure::from_1d(&[0.0, 2.0], &[0.5, 0.5]).unwrap();
        let fwd = integrate_flow(&f, &no_control(g), 0.0, &m, &g).unwrap();
        let back = integrate_flow(&f, &no_control(g), 1.0, &fwd.terminal(), &g).unwrap();
        for (a, b) in back.atoms_at(0).iter().zip(m.atoms()) {
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-10);
        }
    }

    #[test]
    fn semigroup_exact_on_shared_nodes() {
        let f = builtin_field("linear", &json!({"a": [[0.0, 1.0], [-1.0, 0.0]]})).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let m = EmpiricalMeasure::uniform(vec![dvector![1.0, 0.0], dvector![0.0, 2.0]]).unwrap();
        let u = no_control(g);
        assert!(semigroup_check(&f, &u, 0.0, 0.4, 1.0, &m, &g).unwrap() < 1e-9);
        assert_eq!(semigroup_check(&f, &u, 0.2, 0.2, 0.9, &m, &g).unwrap(), 0.0);
    }

    #[test]
    fn apriori_radius_examples() {
        assert_abs_diff_eq!(apriori_radius(0.0, 1.0, 2.0), 3.0);
        assert_eq!(apriori_radius(0.0, 0.0, 5.0), 0.0);
        let e2 = 1f64.exp().powi(2);
        assert_abs_diff_eq!(apriori_radius(1.0, 1.0, 1.0), 2.0 + 2.0 * e2, epsilon = 1e-12);
        let f = builtin_field("zero", &json!({"dim": 1})).unwrap();
        assert_abs_diff_eq!(apriori_radius_for(&f, 0.0, 1.0, 3.0).unwrap(), 4.0);
    }

    #[test]
    fn off_node_start() {
        let f = builtin_field("constant_control", &json!({"dim": 1})).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let u = ControlSignal::constant(g, dvector![-1.0]);
        let m = EmpiricalMeasure::dirac(dvector![2.0]);
        let end = terminal_measure(&f, &u, 0.3, &m, &g).unwrap();
        assert_abs_diff_eq!(end.atoms()[0][0], 1.3, epsilon = 1e-14);
    }

    #[test]
    fn csv_export() {
        let f = builtin_field("zero", &json!({"dim": 2})).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let m = EmpiricalMeasure::dirac(dvector![1.0, 2.0]);
        let sol = integrate_flow(&f, &no_control(g), 0.0, &m, &g).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next(), Some("t,atom_index,x_1,x_2"));
        assert_eq!(s.lines().count(), 4);
    }
}
