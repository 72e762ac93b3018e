use cointel_core::net::*;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, rng_seed: RngSeed::Fixed(0x5eed), ..ProptestConfig::default() }
}

const SIZES: [(usize, usize); 3] = [(1, 1), (2, 10), (3, 50)];

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn value_paths_agree_bitwise(size in 0usize..3, seed in 0u64..1000, t in -3.0f64..3.0, z in -3.0f64..3.0) {
        let (layers, width) = SIZES[size];
        let net = DgmNetwork::new(width, layers, seed).unwrap();
        let e = net.forward_with_input_derivs(t, z);
        prop_assert_eq!(net.forward(t, z).to_bits(), e.f.to_bits());
        prop_assert_eq!(net.tape(t, z).eval(), e);
    }

    #[test]
    fn second_derivative_finite_for_large_inputs(size in 0usize..3, seed in 0u64..1000, t in -1e3f64..1e3, z in -1e3f64..1e3) {
        let (layers, width) = SIZES[size];
        let net = DgmNetwork::new(width, layers, seed).unwrap();
        prop_assert!(net.forward_with_input_derivs(t, z).is_finite());
    }

    #[test]
    fn checkpoint_round_trips_exactly(size in 0usize..3, seed in 0u64..1000) {
        let (layers, width) = SIZES[size];
        let net = DgmNetwork::new(width, layers, seed).unwrap();
        let back = DgmNetwork::from_checkpoint_str(&net.to_checkpoint_string()).unwrap();
        prop_assert_eq!(back.params(), net.params());
        prop_assert_eq!(back.forward(0.3, 1.1).to_bits(), net.forward(0.3, 1.1).to_bits());
    }
}

#[test]
fn input_map_rescales_derivatives() {
    let plain = DgmNetwork::new(4, 2, 9).unwrap();
    let map = InputMap::unit_square(2.0, 0.5, 1.5);
    let mapped = plain.clone().with_input_map(map);
    let (t, z) = (0.8, 1.2);
    let a = plain.forward_with_input_derivs(t / 2.0, z - 0.5);
    let b = mapped.forward_with_input_derivs(t, z);
    assert!((a.f - b.f).abs() < 1e-15);
    assert!((a.f_t / 2.0 - b.f_t).abs() < 1e-14);
    assert!((a.f_z - b.f_z).abs() < 1e-14);
    assert!((a.f_zz - b.f_zz).abs() < 1e-14);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let text = DgmNetwork::new(3, 1, 0).unwrap().to_checkpoint_string();
    assert!(DgmNetwork::from_checkpoint_str(&text.replacen("v1", "v9", 1)).is_err());
    let truncated: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
    assert!(DgmNetwork::from_checkpoint_str(&truncated).is_err());
}
