use itertools::Itertools;
use nalgebra::DVector;
use proptest::prelude::*;
use serde_json::json;

use mfc_core::analysis::{geodesic_semiconcavity_defect, strong_semiconcavity_defect};
use mfc_core::fields::{builtin_cost, FinalCost};
use mfc_core::measure::pushforward;
use mfc_core::transport::{kantorovich_lower_bound, plan_cost, w1, w2, wasserstein};
use mfc_core::{CouplingPlan, EmpiricalMeasure};

fn measure(dim: usize, max_atoms: usize) -> impl Strategy<Value = EmpiricalMeasure> {
    (1..=max_atoms).prop_flat_map(move |n| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), n),
            prop::collection::vec(0.05f64..1.0, n),
        )
            .prop_map(|(atoms, raw)| {
                let total: f64 = raw.iter().sum();
                EmpiricalMeasure::new(
                    atoms.into_iter().map(DVector::from_vec).collect(),
                    raw.iter().map(|w| w / total).collect(),
                )
                .unwrap()
            })
    })
}

fn triple() -> impl Strategy<Value = (EmpiricalMeasure, EmpiricalMeasure, EmpiricalMeasure)> {
    (1usize..=3).prop_flat_map(|d| (measure(d, 5), measure(d, 5), measure(d, 5)))
}

fn uniform_pair() -> impl Strategy<Value = (EmpiricalMeasure, EmpiricalMeasure)> {
    (1usize..=3, 1usize..=5).prop_flat_map(|(d, n)| {
        let cloud = prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
            .prop_map(|a| EmpiricalMeasure::uniform(a.into_iter().map(DVector::from_vec).collect()).unwrap());
        (cloud.clone(), cloud)
    })
}

fn transpose(plan: &CouplingPlan) -> CouplingPlan {
    CouplingPlan::new(plan.target().clone(), plan.source().clone(), plan.mass().transpose()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn w2_is_a_metric((a, b, c) in triple()) {
        let ab = w2(&a, &b).unwrap();
        prop_assert!((ab - w2(&b, &a).unwrap()).abs() <= 1e-9);
        prop_assert!(w2(&a, &a).unwrap() <= 1e-9);
        prop_assert!(w2(&a, &c).unwrap() <= ab + w2(&b, &c).unwrap() + 1e-9);
    }

    #[test]
    fn w1_is_dominated_by_w2((a, b, _c) in triple()) {
        prop_assert!(w1(&a, &b).unwrap() <= w2(&a, &b).unwrap() + 1e-9);
    }

    #[test]
    fn optimal_cost_matches_its_plan((a, b, _c) in triple()) {
        let res = wasserstein(2, &a, &b).unwrap();
        prop_assert!((res.distance.powi(2) - plan_cost(&res.plan).powi(2)).abs() <= 1e-9);
        let product = CouplingPlan::product(&a, &b).unwrap();
        prop_assert!(res.distance <= plan_cost(&product) + 1e-9);
    }

    #[test]
    fn w2_agrees_with_brute_force((a, b) in uniform_pair()) {
        let n = a.len();
        let brute = (0..n)
            .permutations(n)
            .map(|p| (0..n).map(|i| (&a.atoms()[i] - &b.atoms()[p[i]]).norm_squared()).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min)
            .sqrt();
        prop_assert!((w2(&a, &b).unwrap() - brute).abs() <= 1e-9);
    }

    #[test]
    fn kantorovich_bound_is_below_w1((a, b, _c) in triple()) {
        let lb = kantorovich_lower_bound(&a, &b, |x| x[0]).unwrap();
        prop_assert!(lb <= w1(&a, &b).unwrap() + 1e-9);
    }

    #[test]
    fn pushforward_keeps_the_weights(m in measure(2, 6)) {
        let image = pushforward(&m, |x| x.map(|c| c * c - 1.0)).unwrap();
        prop_assert_eq!(image.weights(), m.weights());
    }

    #[test]
    fn disintegration_rebuilds_the_plan((a, b, _c) in triple()) {
        for plan in [wasserstein(2, &a, &b).unwrap().plan, CouplingPlan::product(&a, &b).unwrap()] {
            let rows = plan.disintegrate();
            for (i, row) in rows.iter().enumerate() {
                let row = row.as_ref().unwrap();
                for (j, p) in row.iter().enumerate() {
                    prop_assert!((a.weights()[i] * p - plan.mass()[(i, j)]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn barycentric_projection_preserves_the_target_mean((a, b, _c) in triple()) {
        let plan = wasserstein(2, &a, &b).unwrap().plan;
        let bary: Vec<_> = plan.barycentric_projection().into_iter().map(Option::unwrap).collect();
        let image = a.with_atoms(bary).unwrap();
        prop_assert!((image.mean() - b.mean()).norm() <= 1e-10);
    }

    #[test]
    fn defects_are_symmetric_and_vanish_at_the_ends((a, b, _c) in triple(), l in 0.01f64..0.99) {
        let cost = builtin_cost("interaction", &json!({"kind": "gaussian", "amplitude": 1.0, "width": 0.7})).unwrap();
        let f = |m: &EmpiricalMeasure| cost.eval(m);
        let plan = CouplingPlan::product(&a, &b).unwrap();
        let fwd = strong_semiconcavity_defect(&f, &a, &b, &plan, &[0.0, l, 1.0]).unwrap();
        let back = strong_semiconcavity_defect(&f, &b, &a, &transpose(&plan), &[1.0 - l]).unwrap();
        prop_assert!((fwd.defects[1] - back.defects[0]).abs() <= 1e-10);
        prop_assert!(fwd.defects[0].abs() <= 1e-12 && fwd.defects[2].abs() <= 1e-12);
        let geo = geodesic_semiconcavity_defect(&f, &a, &b, &[0.0, 1.0]).unwrap();
        prop_assert!(geo.defects.iter().all(|d| d.abs() <= 1e-12));
    }
}
