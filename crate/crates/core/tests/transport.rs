use std::path::Path;

use adb::shell::dataset::load_dataset;
use adb::transport::{debiased_distance, exact_ot_oracle, sinkhorn_cost, PointCloud, SinkhornConfig, SinkhornSolution};
use proptest::prelude::*;

fn cloud(points: Vec<Vec<f64>>) -> PointCloud {
    PointCloud::from_rows(&points).unwrap()
}

fn points(max_len: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), 2..=max_len)
}

#[test]
fn near_duplicate_subset_converges_at_small_epsilon() {
    // A subset of a cloud against the cloud itself couples most rows to a
    // single column, which makes the dual close to singular.
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/smoke.csv");
    let data = load_dataset(&path, None, Some("y")).unwrap();
    let all: Vec<usize> = (0..240).collect();
    let full = PointCloud::from_rows_of(data.features.view(), &all).unwrap();
    for (start, len) in [(0, 230), (10, 152), (40, 73)] {
        let sub = PointCloud::from_rows_of(data.features.view(), &all[start..start + len]).unwrap();
        for eps in [0.01, 0.025] {
            let s = SinkhornSolution::solve(&sub, &full, &SinkhornConfig::with_epsilon(eps)).unwrap();
            assert!(s.cost.is_finite() && s.cost > 0.0);
            assert!(s.marginal_violation <= 1e-6, "violation {}", s.marginal_violation);
            assert!(s.iterations <= 1000);
        }
    }
}

#[test]
fn sharp_cost_approaches_exact_as_epsilon_shrinks() {
    let a = cloud(vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![-1.0, 0.5]]);
    let b = cloud(vec![vec![0.5, 0.0], vec![2.0, 2.0], vec![-1.0, -1.0], vec![0.0, 1.0]]);
    let exact = exact_ot_oracle(&a, &b).unwrap();
    let mut previous = f64::INFINITY;
    for eps in [0.5, 0.1, 0.02, 0.005] {
        let gap = (sinkhorn_cost(&a, &b, &SinkhornConfig::with_epsilon(eps)).unwrap() - exact).abs();
        assert!(gap <= previous + 1e-9, "gap {gap} at eps {eps}");
        previous = gap;
    }
    assert!(previous <= 0.01 * exact);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn debiased_distance_is_symmetric_and_zero_on_diagonal(a in points(8, 2), b in points(8, 2)) {
        let cfg = SinkhornConfig::default();
        let (a, b) = (cloud(a), cloud(b));
        prop_assert!(debiased_distance(&a, &a, &cfg).unwrap().abs() <= 1e-8);
        let ab = debiased_distance(&a, &b, &cfg).unwrap();
        let ba = debiased_distance(&b, &a, &cfg).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-10 * (1.0 + ab.abs()));
    }

    #[test]
    fn plans_are_feasible(a in points(8, 3), b in points(8, 3), eps in 0.005f64..1.0) {
        let (a, b) = (cloud(a), cloud(b));
        let s = SinkhornSolution::solve(&a, &b, &SinkhornConfig::with_epsilon(eps)).unwrap();
        prop_assert!(s.marginal_violation <= 1e-6);
        prop_assert!(s.plan.matrix().iter().all(|p| *p >= 0.0 && p.is_finite()));
    }

    #[test]
    fn sharp_cost_never_undercuts_exact(a in points(6, 2), b in points(6, 2)) {
        let (a, b) = (cloud(a), cloud(b));
        let exact = exact_ot_oracle(&a, &b).unwrap();
        let cost = sinkhorn_cost(&a, &b, &SinkhornConfig::with_epsilon(0.01)).unwrap();
        // Any feasible plan costs at least the optimum, up to the marginal tolerance.
        prop_assert!(cost >= exact - 1e-5 * (1.0 + exact));
    }
}
