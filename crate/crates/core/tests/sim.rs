use cointel_core::sim::*;
use cointel_core::stats::Welford;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

/// Per-step units: `dt = 1`, daily-sized volatilities.
fn step_params(kappa: f64, rho: f64) -> CointelationParams {
    CointelationParams { mu: 0.0, sigma: 0.17 / 252f64.sqrt(), eta: 0.16 / 252f64.sqrt(), kappa, rho, x0: 1.0, y0: 1.0 }
}

/// Fixed-seed runs so Monte Carlo checks are reproducible.
fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, rng_seed: RngSeed::Fixed(0x5eed), ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn measured_correlation_is_bounded(
        a in prop::collection::vec(0.5f64..2.0, 5..80),
        b in prop::collection::vec(0.5f64..2.0, 5..80),
        lag in 1usize..4,
    ) {
        let n = a.len().min(b.len());
        if let Ok(c) = measured_correlation(&a[..n], &b[..n], lag) {
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn inferred_correlation_is_monotone_in_lag(seed in 0u64..500, kappa in 0.0f64..0.5, rho in -1.0f64..1.0) {
        let path = simulate_pair(&step_params(kappa, rho), 300.0, 1.0, 2, seed).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for d in 1..40 {
            let c = inferred_correlation_empirical(&path.x, &path.y, d).unwrap();
            prop_assert!(c >= prev);
            prev = c;
            let a = inferred_correlation_approx(rho, kappa, DEFAULT_LAMBDA_IC, d).unwrap();
            let b = inferred_correlation_approx(rho, kappa, DEFAULT_LAMBDA_IC, d + 1).unwrap();
            prop_assert!(b >= a && a >= rho - 1e-15 && b <= 1.0);
        }
    }

    #[test]
    fn expected_crosses_linear_and_continuous(kappa in 0.0f64..=1.0, n in 1usize..5000, g in 0.001f64..0.5) {
        let one = expected_crosses(kappa, n, g).unwrap();
        let two = expected_crosses(kappa, 2 * n, g).unwrap();
        prop_assert!((two - 2.0 * one).abs() <= 1e-12 * two);
        let k2 = (kappa + 1e-9).min(1.0);
        let near = expected_crosses(k2, n, g).unwrap();
        prop_assert!((near - one).abs() <= 1e-3 * n as f64);
    }

    #[test]
    fn same_inputs_same_path(seed in any::<u64>(), substeps in 1usize..10) {
        let p = CointelationParams::example1();
        let a = simulate_pair(&p, 30.0 * DAILY, DAILY, substeps, seed).unwrap();
        let b = simulate_pair(&p, 30.0 * DAILY, DAILY, substeps, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn leader_log_is_a_martingale() {
    let sigma = 0.3;
    let p = CointelationParams { mu: 0.5 * sigma * sigma, sigma, ..CointelationParams::example1() };
    let mut acc = Welford::new();
    for i in 0..100_000 {
        let path = simulate_pair(&p, 0.5, 0.25, 1, path_seed(1 << 33, i)).unwrap();
        acc.push(path.x.last().unwrap().ln());
    }
    let z = acc.mean().abs() / acc.std_error();
    println!("mean ln X_T = {:.3e}, {z:.2} standard errors from 0", acc.mean());
    assert!(z < 3.0);
}

#[test]
fn anti_correlated_legs_sweep_towards_one() {
    let p = step_params(0.1, -1.0);
    for i in 0..5 {
        let path = simulate_pair(&p, 2000.0, 1.0, 8, path_seed(9, i)).unwrap();
        let c1 = measured_correlation(&path.x, &path.y, 1).unwrap();
        let c252 = measured_correlation(&path.x, &path.y, 252).unwrap();
        assert!(c1 < 0.0 && c252 > 0.5, "{c1} {c252}");
    }
}

#[test]
fn longer_lags_measure_higher_correlation() {
    let p = step_params(0.1, -0.6);
    let path = simulate_pair(&p, 2000.0, 1.0, 8, 21).unwrap();
    let c1 = measured_correlation(&path.x, &path.y, 1).unwrap();
    assert!(inferred_correlation_empirical(&path.x, &path.y, 252).unwrap() > c1);
}

#[test]
fn independent_legs_fail_the_cointelation_test() {
    let hyp = CointelationHypothesis::from_params(&step_params(0.1, -0.6), 1.0, 0.015);
    for i in 0..5 {
        let path = simulate_pair(&step_params(0.0, -0.6), 2000.0, 1.0, 8, path_seed(5, i)).unwrap();
        let r = cointelation_test(&path.x, &path.y, &hyp).unwrap();
        assert!(r.applicable && !r.pass && !r.crossings.pass);
        assert!((r.crossings.observed as f64) < 0.5 * r.crossings.expected);
    }
}

#[test]
fn cointelated_paths_cross_more_than_independent_ones() {
    let mean_crosses = |kappa: f64| {
        (0..50)
            .map(|i| {
                let path = simulate_pair(&step_params(kappa, 0.0), 1000.0, 1.0, 8, path_seed(1 << 34, i)).unwrap();
                count_crosses(&path.x, &path.y) as f64
            })
            .sum::<f64>()
            / 50.0
    };
    let (c0, c1, c2) = (mean_crosses(0.0), mean_crosses(0.05), mean_crosses(0.2));
    println!("mean crossings: kappa 0 {c0:.1}, 0.05 {c1:.1}, 0.2 {c2:.1}");
    assert!(c0 < c1 && c1 < c2);
}

#[test]
fn zones_both_populated_on_most_example_paths() {
    // The inner zone is empty whenever |min spread| >= |max spread|, so
    // this holds on a majority of paths rather than almost surely.
    let p = CointelationParams::example1();
    let n = 200;
    let both = (0..n)
        .filter(|&i| {
            let path = simulate_pair(&p, 1000.0 * DAILY, DAILY, 8, path_seed(2, i)).unwrap();
            let r = estimation_zones(&path.x, &path.y).unwrap();
            r.count(Zone::Rho) > 0 && r.count(Zone::Kappa) > 0
        })
        .count();
    println!("both zones populated on {both}/{n} paths");
    assert!(2 * both > n);
}
