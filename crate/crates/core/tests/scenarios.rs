use nalgebra::{dvector, DMatrix, Matrix2, Vector2};
use serde_json::json;

use mfc_core::analysis::{
    constancy_monitor, feedback_membership, frechet_sensitivity_check, interpolation_inequality_check,
    joint_semiconcavity_defect, subdifferential_propagation_check, DEFAULT_EPSILONS, DEFAULT_TOL_SENS,
};
use mfc_core::fields::{builtin_cost, builtin_field, ControlSet, FinalCost, VelocityField};
use mfc_core::flow::{apriori_radius_for, integrate_flow, ControlSignal, TimeGrid};
use mfc_core::linearization::{taylor_residual, LinearizationBundle, Perturbation};
use mfc_core::pmp::{
    costate_bound_ratio, forward_backward_sweep, hamiltonian_drift, integrate_costate, terminal_costate_gap,
    SweepParams,
};
use mfc_core::problem::{reference_problem, Problem, REFERENCE_NAMES};
use mfc_core::transport::{plan_cost, wasserstein};
use mfc_core::value::ExhaustiveValue;
use mfc_core::{CouplingPlan, EmpiricalMeasure};

fn problem(name: &str) -> Problem {
    reference_problem(name).unwrap().build().unwrap()
}

fn refined(p: &Problem, steps: usize) -> TimeGrid {
    TimeGrid::new(p.grid.t0(), p.grid.t1(), steps).unwrap()
}

#[test]
fn supports_stay_inside_the_apriori_ball() {
    for name in REFERENCE_NAMES {
        let p = problem(name);
        let sol = integrate_flow(&p.field, &p.control, p.grid.t0(), &p.initial, &p.grid).unwrap();
        let horizon = p.grid.t1() - p.grid.t0();
        match apriori_radius_for(&p.field, p.control_set.radius(), p.initial.support_radius(), horizon) {
            Ok(bound) => assert!(sol.max_support_radius() <= bound, "{name}"),
            Err(e) => assert!(matches!(e, mfc_core::Error::MissingMetadata(_)), "{name}: {e}"),
        }
    }
}

#[test]
fn costates_respect_the_gronwall_bound() {
    for name in REFERENCE_NAMES {
        let p = problem(name);
        let sol = integrate_flow(&p.field, &p.control, p.grid.t0(), &p.initial, &p.grid).unwrap();
        let ens = integrate_costate(&sol, &p.field, &p.cost).unwrap();
        assert!(terminal_costate_gap(&ens, &p.cost).unwrap() <= 1e-9, "{name}");
        let ratio = costate_bound_ratio(&ens, &p.field);
        assert!(ratio <= 1.0 + 1e-6, "{name}: {ratio}");
    }
}

#[test]
fn hamiltonian_is_constant_for_autonomous_extremal_pieces() {
    let p = problem("mean_attraction");
    let u = ControlSignal::constant(p.control_grid, dvector![1.0, 0.0]);
    let sol = integrate_flow(&p.field, &u, 0.0, &p.initial, &refined(&p, 1000)).unwrap();
    let ens = integrate_costate(&sol, &p.field, &p.cost).unwrap();
    assert!(hamiltonian_drift(&ens, &p.field) <= 1e-6);
}

#[test]
fn double_integrator_sweep_follows_the_linear_adjoint() {
    let p = problem("linear_quadratic");
    let grid = refined(&p, 400);
    let res = forward_backward_sweep(&p.field, &p.cost, &p.initial, &grid, &p.control_grid, &p.control_set, None, &SweepParams::default())
        .unwrap();
    assert!(res.converged);
    let ens = &res.ensemble;
    let a_t = Matrix2::new(0.0, 0.0, 1.0, 0.0);
    let r_end = Vector2::from_column_slice(ens.r_paths[grid.steps()][0].as_slice());
    for k in 0..=grid.steps() {
        let s = grid.t1() - grid.node(k);
        // exp(A^T s) for the nilpotent A^T
        let expected = (Matrix2::identity() + a_t * s) * r_end;
        let got = &ens.r_paths[k][0];
        assert!((got[0] - expected[0]).abs() < 1e-6 && (got[1] - expected[1]).abs() < 1e-6);
    }
    let v = ExhaustiveValue::new(&p.field, &p.cost, grid, p.control_grid, &p.control_set).unwrap();
    let best = v.solve(0.0, &p.initial).unwrap();
    assert_eq!(ens.control.values(), best.control.values());
    assert!((p.cost.eval(&ens.measure_at(grid.steps())).unwrap() - best.value).abs() < 1e-12);
}

#[test]
fn sweep_reports_a_bang_bang_cycle_instead_of_failing() {
    // steering the double integrator to the origin needs a switch inside the
    // horizon; the damped sweep alternates between two extremal candidates
    let mut spec = reference_problem("linear_quadratic").unwrap();
    spec.cost = serde_json::from_value(json!({"name": "potential", "params": {"kind": "quadratic", "dim": 2}})).unwrap();
    spec.initial.atoms = vec![vec![1.0, 0.0]];
    let p = spec.build().unwrap();
    let params = SweepParams { max_iterations: 20, ..Default::default() };
    let res = forward_backward_sweep(&p.field, &p.cost, &p.initial, &p.grid, &p.control_grid, &p.control_set, None, &params)
        .unwrap();
    assert!(!res.converged);
    assert_eq!(res.iterations, 20);
}

#[test]
fn constancy_drift_shrinks_with_the_step_on_a_nonlinear_field() {
    let p = problem("swarm");
    let tau = 0.3;
    let nu = EmpiricalMeasure::uniform(vec![dvector![0.5, 0.5], dvector![-1.0, 0.2], dvector![0.0, -0.7]]).unwrap();
    let u = ControlSignal::constant(p.control_grid, dvector![1.0, -1.0]);
    let mut drifts = Vec::new();
    for steps in [100, 200, 400, 800] {
        let grid = refined(&p, steps);
        let sol = integrate_flow(&p.field, &u, 0.0, &p.initial, &grid).unwrap();
        let ens = integrate_costate(&sol, &p.field, &p.cost).unwrap();
        let k = grid.index_of(tau).unwrap();
        let mu = ens.measure_at(k);
        let plan = CouplingPlan::product(&mu, &nu).unwrap();
        let base = integrate_flow(&p.field, &u, tau, &mu, &grid).unwrap();
        let bundle = LinearizationBundle::compute(&base, &p.field, Some(&plan)).unwrap();
        let rep = constancy_monitor(&ens, &plan, &bundle).unwrap();
        drifts.push((rep.drift1, rep.drift2.unwrap()));
    }
    println!("{drifts:?}");
    for w in drifts.windows(2) {
        assert!(w[1].0 <= w[0].0.max(1e-12) && w[1].1 <= w[0].1.max(1e-12), "{drifts:?}");
    }
    assert!(drifts[1].0 < 1e-5 && drifts[1].1 < 1e-5);
}

#[test]
fn taylor_remainder_is_second_order_on_a_nonlinear_field() {
    let p = problem("swarm");
    let u = ControlSignal::constant(p.control_grid, dvector![0.0, 1.0]);
    let sol = integrate_flow(&p.field, &u, 0.3, &p.initial, &refined(&p, 1000)).unwrap();
    let m = sol.base().clone();
    let nu = EmpiricalMeasure::uniform(vec![dvector![0.4, 0.1], dvector![-0.3, 0.9]]).unwrap();
    let pert = Perturbation {
        dy: Some((0..m.len()).map(|i| dvector![0.1 * i as f64, -0.2]).collect()),
        plan: Some(CouplingPlan::product(&m, &nu).unwrap()),
        dh: -0.5,
    };
    let table = taylor_residual(&sol, &p.field, &pert, &[1e-1, 1e-2, 1e-3]).unwrap();
    println!("{}", table.fitted_slope);
    assert!((1.8..=2.2).contains(&table.fitted_slope), "{}", table.fitted_slope);
}

#[test]
fn measure_derivative_scales_with_plan_cost() {
    let p = problem("swarm");
    let u = ControlSignal::constant(p.control_grid, dvector![1.0, 0.0]);
    let sol = integrate_flow(&p.field, &u, 0.0, &p.initial, &refined(&p, 200)).unwrap();
    let m = sol.base().clone();
    let ratios: Vec<f64> = [0.01, 0.1, 1.0]
        .iter()
        .map(|&s| {
            let plan = CouplingPlan::deterministic(&m, |x| x + dvector![s * x[1], -s * (1.0 + x[0])]).unwrap();
            let b = LinearizationBundle::compute(&sol, &p.field, Some(&plan)).unwrap();
            b.measure_dir_sup().unwrap() / plan_cost(&plan)
        })
        .collect();
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(l, h), r| (l.min(*r), h.max(*r)));
    assert!(hi.is_finite() && hi <= 2.0 * lo, "{ratios:?}");
}

#[test]
fn interpolation_inequality_constant_is_stable_across_a_decade() {
    let p = problem("swarm");
    let u = ControlSignal::constant(p.control_grid, dvector![0.0, 0.0]);
    let m1 = p.initial.clone();
    let lambdas = [0.25, 0.5, 0.75];
    let constants: Vec<f64> = [0.05, 0.15, 0.5]
        .iter()
        .map(|&s| {
            let m2 = m1.with_atoms(m1.atoms().iter().enumerate().map(|(i, x)| x + dvector![s * (i as f64 - 2.5) / 2.5, s]).collect()).unwrap();
            interpolation_inequality_check(&p.field, &u, 0.0, &m1, &m2, &p.grid, &lambdas).unwrap().fitted_constant
        })
        .collect();
    println!("{constants:?}");
    assert!(constants.iter().all(|c| c.is_finite()));
    let (lo, hi) = constants.iter().fold((f64::INFINITY, 0.0f64), |(l, h), c| (l.min(*c), h.max(*c)));
    assert!(hi <= 3.0 * lo.max(1e-12), "{constants:?}");
    // an affine field commutes with interpolation along optimal plans
    let ma = problem("mean_attraction");
    let n1 = ma.initial.clone();
    let n2 = n1.with_atoms(n1.atoms().iter().map(|x| x * 1.5 + dvector![0.2, -0.1]).collect()).unwrap();
    let rep = interpolation_inequality_check(&ma.field, &ma.control, 0.0, &n1, &n2, &ma.grid, &lambdas).unwrap();
    assert!(rep.fitted_constant < 1e-9);
}

struct Shift {
    p: Problem,
}

impl Shift {
    fn new() -> Self {
        Self { p: problem("shift") }
    }

    fn value(&self) -> ExhaustiveValue<'_> {
        ExhaustiveValue::new(&self.p.field, &self.p.cost, self.p.grid, self.p.control_grid, &self.p.control_set).unwrap()
    }
}

#[test]
fn frechet_relation_along_the_shift_optimum() {
    let s = Shift::new();
    let v = s.value();
    let sol = integrate_flow(&s.p.field, &s.p.control, 0.0, &s.p.initial, &s.p.grid).unwrap();
    let ens = integrate_costate(&sol, &s.p.field, &s.p.cost).unwrap();
    for k in [10, 20, 30] {
        let mu = ens.measure_at(k);
        let tests: Vec<EmpiricalMeasure> = [1e-7, -1e-6, 1e-3, -1e-2, 0.0]
            .iter()
            .map(|d| mu.with_atoms(vec![&mu.atoms()[0] + dvector![*d]]).unwrap())
            .collect();
        let cert = frechet_sensitivity_check(&ens, &v, k, &tests, DEFAULT_TOL_SENS).unwrap();
        assert!(cert.pass, "{cert:?}");
        let zero = cert.rows.iter().find(|r| r.w2 == 0.0).unwrap();
        assert_eq!((zero.lhs, zero.pairing), (0.0, 0.0));
    }
}

#[test]
fn gateaux_derivative_propagates_in_the_differentiable_regime() {
    let s = Shift::new();
    let v = s.value();
    let sol = integrate_flow(&s.p.field, &s.p.control, 0.0, &s.p.initial, &s.p.grid).unwrap();
    let ens = integrate_costate(&sol, &s.p.field, &s.p.cost).unwrap();
    let dirs = vec![vec![dvector![0.5]], vec![dvector![-1.0]], vec![dvector![0.0]]];
    let rep = subdifferential_propagation_check(&ens, &v, 4, &[10, 20, 30], &dirs, &DEFAULT_EPSILONS, DEFAULT_TOL_SENS).unwrap();
    assert!(rep.holds_at_tau && rep.pass, "{rep:?}");
    for r in rep.rows.iter().filter(|r| r.direction == 2) {
        assert_eq!((r.d_plus, r.d_minus, r.pairing), (0.0, 0.0, 0.0));
    }
}

#[test]
fn feedback_set_off_the_optimum_moves_toward_the_origin() {
    let s = Shift::new();
    let v = s.value();
    for (t, x) in [(0.25, 2.5), (0.5, -1.75)] {
        let m = EmpiricalMeasure::dirac(dvector![x]);
        let fb = feedback_membership(&v, &s.p.field, t, &m, v.samples(), &DEFAULT_EPSILONS, DEFAULT_TOL_SENS).unwrap();
        let members: Vec<f64> = fb.members().map(|r| r.control[0]).collect();
        assert_eq!(members, vec![-x.signum()], "t = {t}, x = {x}");
    }
    let single = ControlSet::singleton(dvector![-1.0]).samples();
    let fb = feedback_membership(&v, &s.p.field, 0.5, &EmpiricalMeasure::dirac(dvector![1.5]), &single, &DEFAULT_EPSILONS, DEFAULT_TOL_SENS)
        .unwrap();
    assert_eq!(fb.members().count(), 1);
}

#[test]
fn joint_semiconcavity_of_the_shift_value_is_stable() {
    let s = Shift::new();
    let v = s.value();
    let m1 = EmpiricalMeasure::from_1d(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
    let m2 = EmpiricalMeasure::from_1d(&[2.0, 4.0], &[0.5, 0.5]).unwrap();
    let plan = wasserstein(2, &m1, &m2).unwrap().plan;
    let fit = |n: usize| {
        let l: Vec<f64> = (1..=n).map(|k| k as f64 / (n + 1) as f64).collect();
        joint_semiconcavity_defect(&v, &s.p.grid, (0.0, &m1), (0.5, &m2), &plan, &l).unwrap()
    };
    let (a, b) = (fit(5), fit(9));
    println!("{} {} {}", a.fitted_constant, b.fitted_constant, b.snap_distance);
    assert!(a.fitted_constant.is_finite() && b.fitted_constant.is_finite());
    assert!((a.fitted_constant - b.fitted_constant).abs() <= 0.2 * a.fitted_constant.abs().max(b.fitted_constant.abs()));
    assert!(b.snap_distance <= 0.5 * s.p.grid.step());
}

#[test]
fn fields_without_time_regularity_are_refused_for_joint_checks() {
    // every catalogue field is autonomous, so exercise the refusal through a
    // wrapper that withholds the metadata
    struct Opaque(mfc_core::fields::BuiltinField);
    impl VelocityField for Opaque {
        fn name(&self) -> &str {
            "opaque"
        }
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn control_dim(&self) -> usize {
            self.0.control_dim()
        }
        fn eval(&self, t: f64, mu: &EmpiricalMeasure, u: &mfc_core::Point, x: &mfc_core::Point) -> mfc_core::Point {
            self.0.eval(t, mu, u, x)
        }
        fn jac_x(&self, t: f64, mu: &EmpiricalMeasure, u: &mfc_core::Point, x: &mfc_core::Point) -> DMatrix<f64> {
            self.0.jac_x(t, mu, u, x)
        }
        fn grad_mu(&self, t: f64, mu: &EmpiricalMeasure, u: &mfc_core::Point, x: &mfc_core::Point, y: &mfc_core::Point) -> DMatrix<f64> {
            self.0.grad_mu(t, mu, u, x, y)
        }
        fn metadata(&self, r: f64) -> mfc_core::fields::FieldMetadata {
            mfc_core::fields::FieldMetadata { time_regular: false, ..self.0.metadata(r) }
        }
    }
    let s = Shift::new();
    let f = Opaque(builtin_field("constant_control", &json!({"dim": 1})).unwrap());
    let c = builtin_cost("potential", &json!({"kind": "quadratic", "dim": 1})).unwrap();
    let v = ExhaustiveValue::new(&f, &c, s.p.grid, s.p.control_grid, &s.p.control_set).unwrap();
    let m = EmpiricalMeasure::dirac(dvector![1.0]);
    let plan = CouplingPlan::diagonal(&m);
    let err = joint_semiconcavity_defect(&v, &s.p.grid, (0.0, &m), (0.5, &m), &plan, &[0.5]).unwrap_err();
    assert!(matches!(err, mfc_core::Error::MissingMetadata(_)));
}
