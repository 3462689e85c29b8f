//! Serializable description of a Mayer problem and a catalogue of reference
//! problems used by the tests and the scenario runner.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::fields::{builtin_cost, builtin_field, BuiltinCost, BuiltinField, ControlSet, FinalCost, VelocityField};
use crate::flow::{ControlSignal, TimeGrid};
use crate::measure::EmpiricalMeasure;

/// Catalogue entry referenced by name with a parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSpec {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    pub atoms: Vec<Vec<f64>>,
    /// Uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl MeasureSpec {
    pub fn build(&self) -> Result<EmpiricalMeasure> {
        let atoms: Vec<_> = self.atoms.iter().map(|a| DVector::from_column_slice(a)).collect();
        match &self.weights {
            Some(w) => EmpiricalMeasure::new(atoms, w.clone()),
            None => EmpiricalMeasure::uniform(atoms),
        }
    }

    pub fn from_measure(m: &EmpiricalMeasure) -> Self {
        Self {
            atoms: m.atoms().iter().map(|a| a.iter().copied().collect()).collect(),
            weights: Some(m.weights().to_vec()),
        }
    }
}

fn unit_horizon() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub field: NamedSpec,
    pub cost: NamedSpec,
    pub control_set: ControlSet,
    #[serde(default = "unit_horizon")]
    pub horizon: [f64; 2],
    /// Integration steps over the horizon.
    pub steps: usize,
    /// Number of piecewise-constant control intervals; must divide `steps`.
    pub control_steps: usize,
    pub initial: MeasureSpec,
    /// Nominal control, one value per interval. Defaults to the first sample
    /// of the control set held constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<Vec<Vec<f64>>>,
}

/// A validated problem with its nominal control.
#[derive(Debug, Clone)]
pub struct Problem {
    pub field: BuiltinField,
    pub cost: BuiltinCost,
    pub control_set: ControlSet,
    pub grid: TimeGrid,
    pub control_grid: TimeGrid,
    pub initial: EmpiricalMeasure,
    pub control: ControlSignal,
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Problem> {
        let field = builtin_field(&self.field.name, &self.field.params)?;
        let cost = builtin_cost(&self.cost.name, &self.cost.params)?;
        self.control_set.validate()?;
        let [t0, t1] = self.horizon;
        let grid = TimeGrid::new(t0, t1, self.steps)?;
        let control_grid = TimeGrid::new(t0, t1, self.control_steps)?;
        if !control_grid.is_refined_by(&grid) {
            return Err(Error::GridMismatch(format!(
                "{} control intervals do not divide {} steps",
                self.control_steps, self.steps
            )));
        }
        let initial = self.initial.build()?;
        if initial.dim() != field.dim() {
            return Err(Error::DimensionMismatch { expected: field.dim(), got: initial.dim() });
        }
        if self.control_set.dim() != field.control_dim() {
            return Err(Error::DimensionMismatch { expected: field.control_dim(), got: self.control_set.dim() });
        }
        // evaluating the cost once catches target/atom dimension clashes early
        cost.eval(&initial)?;
        let control = match &self.control {
            Some(values) => {
                ControlSignal::new(control_grid, values.iter().map(|v| DVector::from_column_slice(v)).collect())?
            }
            None => ControlSignal::constant(control_grid, self.control_set.samples()[0].clone()),
        };
        if control.dim() != field.control_dim() {
            return Err(Error::DimensionMismatch { expected: field.control_dim(), got: control.dim() });
        }
        control.validate_in(&self.control_set)?;
        Ok(Problem { field, cost, control_set: self.control_set.clone(), grid, control_grid, initial, control })
    }
}

fn spec(v: Value) -> ProblemSpec {
    serde_json::from_value(v).expect("reference problem literal")
}

/// Names of the reference problems, in catalogue order.
pub const REFERENCE_NAMES: [&str; 7] =
    ["zero", "shift", "mean_attraction", "linear_quadratic", "swarm", "target", "rotation"];

/// Reference problem by name. All have at most eight particles.
///
/// `shift` is the one-dimensional problem `v = u`, `U = {-1, 0, 1}`, four
/// control intervals on `[0, 1]`, `mu0 = delta_2` and `phi = int x^2`, whose
/// optimal control is `u = -1` with value 1.
pub fn reference_problem(name: &str) -> Result<ProblemSpec> {
    let signs = |d| serde_json::to_value(ControlSet::signs(d)).unwrap();
    let quad = |d: usize| json!({"name": "potential", "params": {"kind": "quadratic", "dim": d}});
    let v = match name {
        "zero" => json!({
            "field": {"name": "zero", "params": {"dim": 1, "control_dim": 1}},
            "cost": quad(1),
            "control_set": signs(1),
            "steps": 40, "control_steps": 4,
            "initial": {"atoms": [[-1.0], [0.5], [2.0]]},
            "control": [[1.0], [-1.0], [0.0], [1.0]],
        }),
        "shift" => json!({
            "field": {"name": "constant_control", "params": {"dim": 1}},
            "cost": quad(1),
            "control_set": signs(1),
            "steps": 40, "control_steps": 4,
            "initial": {"atoms": [[2.0]]},
            "control": [[-1.0], [-1.0], [-1.0], [-1.0]],
        }),
        "mean_attraction" => json!({
            "field": {"name": "mean_attraction", "params": {"dim": 2, "strength": 1.0, "control_matrix": [[1.0, 0.0], [0.0, 1.0]]}},
            "cost": {"name": "potential", "params": {"kind": "quadratic", "center": [1.0, 0.0]}},
            "control_set": signs(2),
            "steps": 40, "control_steps": 4,
            "initial": {"atoms": [[0.0, 0.0], [1.0, 0.5], [-0.5, 1.0], [0.3, -0.8]], "weights": [0.1, 0.2, 0.3, 0.4]},
            "control": [[1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, -1.0]],
        }),
        "linear_quadratic" => json!({
            "field": {"name": "linear", "params": {"a": [[0.0, 1.0], [0.0, 0.0]], "b": [[0.0], [1.0]]}},
            "cost": {"name": "potential", "params": {"kind": "quadratic", "center": [2.0, 2.0]}},
            "control_set": {"kind": "box", "lower": [-1.0], "upper": [1.0], "points_per_axis": 5},
            "steps": 40, "control_steps": 4,
            "initial": {"atoms": [[0.0, 0.0]]},
            "control": [[-1.0], [-0.5], [0.0], [0.5]],
        }),
        "swarm" => json!({
            "field": {"name": "convolution", "params": {
                "dim": 2, "kernel": "gaussian_gradient", "amplitude": 1.0, "width": 1.0,
                "control_matrix": [[1.0, 0.0], [0.0, 1.0]]}},
            "cost": {"name": "interaction", "params": {"kind": "gaussian", "amplitude": 1.0, "width": 0.8}},
            "control_set": signs(2),
            "steps": 40, "control_steps": 4,
            "initial": {"atoms": [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.5], [0.5, -1.0], [1.2, 1.1]]},
            "control": [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]],
        }),
        "target" => json!({
            "field": {"name": "mean_attraction", "params": {"dim": 1, "strength": 0.5, "control_matrix": [[1.0]]}},
            "cost": {"name": "w2_squared_to_target", "params": {"atoms": [[-1.0], [1.0]]}},
            "control_set": signs(1),
            "steps": 40, "control_steps": 4,
            "initial": {"atoms": [[-2.0], [-0.7], [0.1], [0.9], [2.3]]},
            "control": [[1.0], [1.0], [-1.0], [-1.0]],
        }),
        "rotation" => json!({
            "field": {"name": "linear", "params": {"a": [[0.0, 1.0], [-1.0, 0.0]]}},
            "cost": {"name": "potential", "params": {"kind": "affine", "slope": [1.0, 0.5]}},
            "control_set": {"kind": "finite", "values": [[]]},
            "horizon": [0.0, FRAC_PI_2],
            "steps": 40, "control_steps": 4,
            "initial": {"atoms": [[1.0, 0.0], [0.0, 1.0], [-0.5, -0.5]]},
        }),
        other => return Err(Error::UnknownName(other.into())),
    };
    Ok(spec(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_reference_problem_builds() {
        for name in REFERENCE_NAMES {
            let p = reference_problem(name).unwrap().build().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(p.initial.len() <= 8);
        }
        assert!(matches!(reference_problem("nope"), Err(Error::UnknownName(_))));
    }

    #[test]
    fn round_trips_through_json() {
        let s = reference_problem("mean_attraction").unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<ProblemSpec>(&text).unwrap(), s);
    }

    #[test]
    fn rejects_inconsistent_problems() {
        let mut s = reference_problem("shift").unwrap();
        s.control_steps = 3;
        assert!(matches!(s.build(), Err(Error::GridMismatch(_))));
        let mut s = reference_problem("shift").unwrap();
        s.initial.atoms = vec![vec![1.0, 2.0]];
        assert!(matches!(s.build(), Err(Error::DimensionMismatch { .. })));
        let mut s = reference_problem("shift").unwrap();
        s.control = Some(vec![vec![0.5]; 4]);
        assert!(s.build().is_err());
        let bad: std::result::Result<ProblemSpec, _> =
            serde_json::from_value(json!({"field": {"name": "zero"}, "oops": 1}));
        assert!(bad.is_err());
    }
}
