use approx::assert_relative_eq;
use cointel_core::backtest::*;
use cointel_core::dgm::{cointelation_pde_problem, Domain, PI_MAX};
use cointel_core::net::DgmNetwork;
use cointel_core::sim::{simulate_pair, CointelationParams, PathPair, DAILY};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

fn random_path(steps: Vec<(f64, f64)>) -> PathPair {
    let (mut x, mut y) = (vec![1.0], vec![1.0]);
    for (a, b) in steps {
        x.push(x.last().unwrap() * (1.0 + a));
        y.push(y.last().unwrap() * (1.0 + b));
    }
    let t = (0..x.len()).map(|i| i as f64).collect();
    PathPair::from_series(t, x, y).unwrap()
}

/// Random weights drawn from a fixed table indexed by step.
struct TableRule(Vec<(f64, f64)>);

impl WeightRule for TableRule {
    fn weights(&mut self, p: &Prefix) -> (f64, f64) {
        self.0[p.step() % self.0.len()]
    }
    fn kind(&self) -> StrategyKind {
        StrategyKind::Fixed
    }
}

/// Fixed-seed runs so Monte Carlo checks are reproducible.
fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, rng_seed: RngSeed::Fixed(0x5eed), ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn wealth_telescopes(
        steps in prop::collection::vec((-0.05f64..0.05, -0.05f64..0.05), 2..60),
        ws in prop::collection::vec((-1.5f64..1.5, -1.5f64..1.5), 1..8),
        v0 in 0.1f64..10.0,
    ) {
        let path = random_path(steps);
        let tr = run_strategy(&path, TableRule(ws), v0, "t").unwrap();
        prop_assert_eq!(tr.len(), path.len());
        prop_assert_eq!(tr.w1.len(), path.len());
        let mut v = v0;
        for k in 0..path.len() - 1 {
            if tr.halted_at.is_some_and(|h| k >= h) {
                break;
            }
            let step = tr.w1[k] * (path.x[k + 1] / path.x[k] - 1.0) + tr.w2[k] * (path.y[k + 1] / path.y[k] - 1.0);
            v = (v * (1.0 + step)).max(0.0);
            prop_assert!((tr.wealth[k + 1] - v).abs() <= 1e-12 * v.abs().max(1e-300));
            prop_assert!((tr.pnl[k + 1] - (tr.wealth[k + 1] - v0)).abs() <= 1e-12 * v0);
        }
    }

    #[test]
    fn switching_trades_the_richer_shadow(
        steps in prop::collection::vec((-0.05f64..0.05, -0.05f64..0.05), 2..80),
        a in (-1.0f64..2.0, -1.0f64..2.0),
        b in (0.0f64..1.0,),
    ) {
        let path = random_path(steps);
        let first = FixedWeights(a.0, a.1);
        let second = FixedWeights(b.0, 1.0 - b.0);
        let mut ds = dynamic_switching(first, second, SwitchMode::Shadow);
        let tr = run_strategy(&path, &mut ds, 1.0, "ds").unwrap();
        for (k, &(pick_first, va, vb)) in ds.choices.iter().enumerate() {
            let kept = if pick_first { va } else { vb };
            let dropped = if pick_first { vb } else { va };
            prop_assert!(kept >= dropped);
            let w = if pick_first { (a.0, a.1) } else { (b.0, 1.0 - b.0) };
            prop_assert_eq!((tr.w1[k], tr.w2[k]), w);
        }
    }
}

#[test]
fn mvc_is_long_only_and_nearly_constant() {
    let p = CointelationParams::example1();
    let path = simulate_pair(&p, 1000.0 * DAILY, DAILY, 8, 3).unwrap();
    let tr = run_strategy(&path, mvc_strategy(&p, 0.5, DAILY).unwrap(), 1.0, "MVC").unwrap();
    for k in 0..path.len() - 1 {
        assert!(tr.w1[k] >= 0.0 && tr.w2[k] >= 0.0);
        assert_relative_eq!(tr.w1[k] + tr.w2[k], 1.0, max_relative = 1e-12);
    }
    let sd = tr.w1_std();
    println!("MVC w1 standard deviation over the path: {sd:.4}");
    assert!(sd < 0.1, "{sd}");
}

#[test]
fn sc_weights_are_pairs_and_clamped() {
    let p = CointelationParams::example1();
    let horizon = 200.0 * DAILY;
    let path = simulate_pair(&p, horizon, DAILY, 8, 11).unwrap();
    let pde = cointelation_pde_problem(&p, 0.5, Domain::new(horizon, 0.5, 1.5).unwrap()).unwrap();
    let net = DgmNetwork::new(5, 1, 2).unwrap().with_input_map(pde.domain.input_map());
    let tr = run_strategy(&path, sc_strategy(&net, &p, 0.5).unwrap(), 1.0, "SC").unwrap();
    for k in 0..path.len() {
        assert_eq!(tr.w1[k], -tr.w2[k]);
        assert!(tr.w1[k].abs() <= PI_MAX);
    }
}

#[test]
fn sc_flat_at_drift_root() {
    // A network that is identically one: f_z = 0, so pi_1 = 2 A / sigma~ and
    // vanishes where mu = kappa (z - 1).
    let p = CointelationParams::example1();
    let mut net = DgmNetwork::new(3, 1, 0).unwrap();
    net.params_mut().iter_mut().for_each(|v| *v = 0.0);
    let n = net.n_params();
    net.params_mut()[n - 1] = 1.0;
    let z = 1.0 + p.mu / p.kappa;
    let mut rule = sc_strategy(&net, &p, 0.5).unwrap();
    let (a, b) = rule.weights(&Prefix { times: &[0.0], x: &[z], y: &[1.0] });
    assert!(a.abs() < 1e-12 && b.abs() < 1e-12);
}

#[test]
fn sc_evaluation_failure_trades_flat() {
    let p = CointelationParams::example1();
    let mut net = DgmNetwork::new(3, 1, 0).unwrap();
    net.params_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut rule = sc_strategy(&net, &p, 0.5).unwrap();
    assert_eq!(rule.weights(&Prefix { times: &[0.0], x: &[1.0], y: &[1.0] }), (0.0, 0.0));
    assert_eq!(rule.fallback_events(), 1);
}

#[test]
fn long_short_weights_vary_more_than_long_only() {
    let p = CointelationParams::example1();
    let horizon = 1000.0 * DAILY;
    let path = simulate_pair(&p, horizon, DAILY, 8, 5).unwrap();
    let mut net = DgmNetwork::new(3, 1, 0).unwrap();
    net.params_mut().iter_mut().for_each(|v| *v = 0.0);
    let n = net.n_params();
    net.params_mut()[n - 1] = 1.0;
    let sc = run_strategy(&path, sc_strategy(&net, &p, 0.5).unwrap(), 1.0, "SC").unwrap();
    let mvc = run_strategy(&path, mvc_strategy(&p, 0.5, DAILY).unwrap(), 1.0, "MVC").unwrap();
    println!("w1 std: SC {:.4}, MVC {:.4}", sc.w1_std(), mvc.w1_std());
    assert!(sc.w1_std() > mvc.w1_std());
}

#[test]
fn one_book_and_shadow_agree_when_one_rule_always_wins() {
    let path = random_path(vec![(0.01, -0.01); 20]);
    let a = run_strategy(&path, dynamic_switching(FixedWeights(1.0, 0.0), FixedWeights(0.0, 1.0), SwitchMode::Shadow), 1.0, "a").unwrap();
    let b = run_strategy(&path, dynamic_switching(FixedWeights(1.0, 0.0), FixedWeights(0.0, 1.0), SwitchMode::OneBook), 1.0, "b").unwrap();
    assert_eq!(a.wealth, b.wealth);
}
