use jumpsmp::dissecting::{build_dissecting_system, verify_system};
use jumpsmp::noise::{sample_ensemble, MarkSpace, NoiseModel, TimeGrid};
use proptest::prelude::*;

#[test]
fn level_three_on_two_marks() {
    let g = TimeGrid::new(1.0, 64).unwrap();
    let s = build_dissecting_system(&g, &MarkSpace::numbered(2).unwrap(), 3).unwrap();
    let cells = &s.level(3).unwrap().cells;
    assert_eq!(cells.len(), 16);
    for c in cells {
        assert_eq!(c.steps() as f64 * g.dt(), 0.125);
    }
}

#[test]
fn level_zero_is_whole_horizon() {
    let g = TimeGrid::new(2.0, 8).unwrap();
    let s = build_dissecting_system(&g, &MarkSpace::numbered(3).unwrap(), 0).unwrap();
    let cells = &s.level(0).unwrap().cells;
    assert_eq!(cells.len(), 3);
    assert!(cells.iter().all(|c| c.start == 0 && c.end == 8));
}

#[test]
fn poisson_variance_tracks_lambda_times_width() {
    let g = TimeGrid::new(1.0, 16).unwrap();
    let marks = MarkSpace::singleton();
    let e = sample_ensemble(
        &NoiseModel::CompensatedPoisson { intensities: vec![2.0] },
        &g,
        &marks,
        2000,
        3,
    )
    .unwrap();
    let s = build_dissecting_system(&g, &marks, 4).unwrap();
    let r = verify_system(&s, &e).unwrap();
    assert!(r.all_exact_ok());
    assert!(r.variance_decreasing);
    for l in &r.levels {
        let expected = 2.0 * 0.5f64.powi(l.level as i32);
        assert!(
            (l.max_variance.mean - expected).abs() <= 4.0 * l.max_variance.std_error,
            "{} {}",
            l.max_variance.mean,
            expected
        );
    }
}

#[test]
fn brownian_variance_is_width() {
    let g = TimeGrid::new(1.0, 8).unwrap();
    let marks = MarkSpace::singleton();
    let e = sample_ensemble(&NoiseModel::Brownian, &g, &marks, 500, 4).unwrap();
    let s = build_dissecting_system(&g, &marks, 3).unwrap();
    let r = verify_system(&s, &e).unwrap();
    for l in &r.levels {
        let expected = 0.5f64.powi(l.level as i32);
        assert!((l.max_variance.mean - expected).abs() <= 4.0 * l.max_variance.std_error + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn nested_disjoint_covering(level in 0usize..5, marks in 1usize..4, extra in 0u32..3) {
        let steps = (1usize << level) << extra;
        let g = TimeGrid::new(1.0, steps).unwrap();
        let s = build_dissecting_system(&g, &MarkSpace::numbered(marks).unwrap(), level).unwrap();
        for n in 0..=level {
            let lv = s.level(n).unwrap();
            let mut covered = vec![0u32; steps * marks];
            for c in &lv.cells {
                for k in c.start..c.end {
                    for &z in &c.marks {
                        covered[k * marks + z] += 1;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&v| v == 1));
            if n > 0 {
                let parents = &s.level(n - 1).unwrap().cells;
                for (c, &p) in lv.cells.iter().zip(&lv.parents) {
                    prop_assert!(parents[p].contains(c));
                }
            }
        }
    }
}
