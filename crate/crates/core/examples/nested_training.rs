//! Trains a quadratic task on a three-layer hierarchy with quantized
//! uplinks and prints the loss and gradient norm per round.

use qmlhfl::engine::{self, RunOptions, Schedule};
use qmlhfl::quantizer::QuantizerSpec;
use qmlhfl::task::Task;
use qmlhfl::topology::Topology;

fn main() {
    let topology = Topology::uniform(&[4, 2, 2]).unwrap();
    let task = Task::quadratic_synthetic(topology.num_devices(), 8, (20, 40), 1.0, 0.5, 3).unwrap();
    let schedule = Schedule::new(vec![4, 2, 2], 25).unwrap();
    let quantizers = [8, 12, 16].map(|s| QuantizerSpec::stochastic(s).unwrap());
    let opts = RunOptions {
        mu: 0.02,
        batch_size: 8,
        weighted: true,
        seed: 11,
        round_latency: 1.0,
        initial: None,
    };
    let metrics = engine::run(&task, &topology, &schedule, &quantizers, &opts).unwrap();

    println!("round        loss   |grad F|^2");
    println!(
        "{:>5} {:>11.6} {:>12.3e}",
        0, metrics.initial.loss, metrics.initial.grad_norm_sq
    );
    for r in metrics.rounds.iter().step_by(4) {
        println!("{:>5} {:>11.6} {:>12.3e}", r.round, r.loss, r.grad_norm_sq);
    }
    let optimum = task.quadratic_optimum(true).unwrap();
    let dist: f64 = metrics
        .final_model
        .iter()
        .zip(optimum.0.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    println!("squared distance to the optimum: {dist:.3e}");
}
