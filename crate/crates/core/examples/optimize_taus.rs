//! Chooses the per-layer counts that trade convergence speed against the
//! quantization error under a deadline, and compares with exhaustive search.

use qmlhfl::latency::LatencyParams;
use qmlhfl::optimizer::{self, ObjectiveSpec, OptimizerSettings};
use qmlhfl::topology::Topology;

fn main() {
    let topology = Topology::uniform(&[3, 2, 2]).unwrap();
    let freqs: Vec<f64> = (0..topology.num_devices())
        .map(|i| 0.6e9 + 0.1e9 * i as f64)
        .collect();
    let mut lat = LatencyParams::reference(freqs, 40.0, 5.6724e6, 3);
    lat.rounds = 50;
    lat.deadline = 50.0 * 500.0;
    let q = vec![0.3, 0.15, 0.05];

    for alpha in [0.5, 0.8, 0.95] {
        let mut spec = ObjectiveSpec::from_topology(&topology, q.clone(), lat.clone(), alpha);
        spec.tau_max = Some(32);
        let r = optimizer::optimize(&spec, &OptimizerSettings::default()).unwrap();
        let (bf, bf_obj) = optimizer::brute_force(&spec, 32).unwrap();
        println!("alpha {alpha}:");
        println!(
            "  continuous {:.3?} -> {:.5}",
            r.taus_continuous, r.objective_continuous
        );
        println!(
            "  integer    {:?} -> {:.5} ({} programs solved)",
            r.taus_integer, r.objective_integer, r.iterations
        );
        println!("  exhaustive {bf:?} -> {bf_obj:.5}");
        println!(
            "  round latency {:.1} s, slack {:.1} s",
            r.round_latency, r.slack
        );
    }
}
