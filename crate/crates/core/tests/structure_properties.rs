//! Topology, quantizer and latency invariants.

use proptest::prelude::*;
use qmlhfl::latency::LatencyParams;
use qmlhfl::quantizer::{self, QuantizerSpec};
use qmlhfl::topology::{NodeId, Topology};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn uniform_tree_counts(fan in prop::collection::vec(1usize..5, 1..5)) {
        let t = Topology::uniform(&fan).unwrap();
        let devices: usize = fan.iter().product();
        prop_assert_eq!(t.num_devices(), devices);
        prop_assert_eq!(t.num_layers(), fan.len());
        for layer in 0..=t.num_layers() {
            let covered: usize = (0..t.layer_size(layer)).map(|i| t.subtree_devices(NodeId::new(layer, i))).sum();
            prop_assert_eq!(covered, devices);
        }
        for (n, &c) in t.server_counts().iter().enumerate() {
            prop_assert_eq!(c, t.layer_size(n + 1));
        }
    }

    #[test]
    fn reducing_depth_keeps_every_device_under_its_ancestor(fan in prop::collection::vec(1usize..4, 2..5), k in 1usize..4) {
        let t = Topology::uniform(&fan).unwrap();
        let k = k.min(fan.len() - 1);
        let r = t.reduce_depth(k).unwrap();
        prop_assert_eq!(r.num_devices(), t.num_devices());
        prop_assert_eq!(r.num_layers(), t.num_layers() - k);
        for d in 0..t.num_devices() {
            let mut node = NodeId::new(0, d);
            for _ in 0..=k {
                node = t.parent(node).unwrap();
            }
            prop_assert_eq!(r.parent(NodeId::new(0, d)).unwrap().index, node.index);
        }
    }

    #[test]
    fn quantized_values_sit_on_the_grid(
        x in prop::collection::vec(-10.0f64..10.0, 1..20),
        s in 1u32..12,
        seed in any::<u64>(),
    ) {
        let spec = QuantizerSpec::stochastic(s).unwrap();
        let y = spec.quantize(&x, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in x.iter().zip(&y) {
            if norm == 0.0 {
                prop_assert_eq!(*b, 0.0);
                continue;
            }
            prop_assert!(*b == 0.0 || b.signum() == a.signum());
            let level = b.abs() / norm * s as f64;
            prop_assert!((level - level.round()).abs() < 1e-9);
            // the two neighbouring levels of |a|
            let exact = a.abs() / norm * s as f64;
            prop_assert!(level.round() == exact.floor() || level.round() == exact.ceil());
        }
    }

    #[test]
    fn identity_passes_through(x in prop::collection::vec(-1e6f64..1e6, 0..10)) {
        let y = QuantizerSpec::identity().quantize(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn latency_grows_with_every_count(
        taus in prop::collection::vec(1u32..20, 3),
        layer in 0usize..3,
        freqs in prop::collection::vec(0.5e9f64..2e9, 1..6),
    ) {
        let lat = LatencyParams::reference(freqs, 40.0, 5.6724e6, 3);
        let t: Vec<f64> = taus.iter().map(|&v| v as f64).collect();
        let mut more = t.clone();
        more[layer] += 1.0;
        prop_assert!(lat.round_latency(&more).unwrap() > lat.round_latency(&t).unwrap());
    }

    #[test]
    fn distance_slows_the_uplink(k1 in 1.0f64..20.0, extra in 0.1f64..10.0) {
        let mut lat = LatencyParams::reference(vec![1e9], 40.0, 1e6, 2);
        lat.kappa = k1;
        let near = lat.compute_tde().unwrap();
        lat.kappa = k1 + extra;
        prop_assert!(lat.compute_tde().unwrap() > near);
    }
}

#[test]
fn measured_q_stays_under_the_analytic_bound() {
    for d in [1usize, 3, 16, 50] {
        for s in [1u32, 2, 5, 10] {
            let q =
                quantizer::measure_q(&QuantizerSpec::stochastic(s).unwrap(), d, 4000, 3).unwrap();
            let bound = (d as f64 / (s * s) as f64).min((d as f64).sqrt() / s as f64);
            // sampling noise on top of the bound
            assert!(q <= bound * 1.1 + 1e-12, "d={d} s={s}: {q} > {bound}");
        }
    }
}
