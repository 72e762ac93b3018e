use cointel_core::moments::return_moments;
use cointel_core::mvc::*;
use cointel_core::sim::{CointelationParams, DAILY};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, rng_seed: RngSeed::Fixed(0x5eed), ..ProptestConfig::default() }
}

/// `L L'` for a lower-triangular `L` with a positive diagonal.
fn spd() -> impl Strategy<Value = Mat2> {
    (0.05f64..1.0, -0.5f64..0.5, 0.05f64..1.0).prop_map(|(a, b, c)| [[a * a, a * b], [a * b, b * b + c * c]])
}

fn means() -> impl Strategy<Value = [f64; 2]> {
    [-0.2f64..0.2, -0.2f64..0.2]
}

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn interior_optimum_satisfies_first_order_conditions(m in means(), s in spd(), tau in 0.0f64..2.0) {
        let w = mvc_weights(m, &s, tau).unwrap();
        prop_assume!(!w.clipped && w.h1 > 1e-3 && w.h2 > 1e-3);
        let u = mvc_utility(w.as_array(), m, &s, tau);
        for eps in [1e-4, -1e-4] {
            prop_assert!(u >= mvc_utility([w.h1 + eps, w.h2 - eps], m, &s, tau));
        }
    }

    #[test]
    fn clipped_optimum_beats_the_simplex(m in means(), s in spd(), tau in 0.0f64..2.0) {
        let w = mvc_weights(m, &s, tau).unwrap();
        let u = mvc_utility(w.as_array(), m, &s, tau);
        for k in 0..=100 {
            let h = k as f64 / 100.0;
            prop_assert!(u >= mvc_utility([h, 1.0 - h], m, &s, tau) - 1e-12);
        }
    }

    #[test]
    fn minimum_variance_ignores_mean_scale(m in means(), s in spd(), c in 0.1f64..10.0) {
        let a = mvc_weights(m, &s, 0.0).unwrap();
        let b = mvc_weights([c * m[0], c * m[1]], &s, 0.0).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn weights_continuous_in_tau(m in means(), s in spd(), tau in 0.0f64..2.0) {
        let a = mvc_weights_unconstrained(m, &s, tau).unwrap();
        let b = mvc_weights_unconstrained(m, &s, tau + 1e-9).unwrap();
        prop_assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
    }
}

#[test]
fn example_neighbourhood_covariances_are_psd() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let e = CointelationParams::example1();
    let mut checked = 0;
    for _ in 0..1000 {
        let mut r = |v: f64| v * rng.random_range(0.5..1.5);
        let p = CointelationParams {
            mu: r(e.mu),
            sigma: r(e.sigma),
            kappa: r(e.kappa),
            eta: r(e.eta),
            rho: r(e.rho).clamp(-1.0, 1.0),
            x0: 1.0,
            y0: 1.0,
        };
        let x = rng.random_range(0.5..2.0);
        let m = return_moments(&p, x, 1.0, DAILY).unwrap();
        if m.flagged {
            continue;
        }
        let s = covariance_matrix(&m).unwrap();
        assert_eq!(s[0][1], s[1][0]);
        assert!(eigenvalues(&s)[0] >= -1e-10);
        checked += 1;
    }
    assert!(checked > 900, "{checked}");
}
