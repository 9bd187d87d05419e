//! With identity quantizers and every server count at 1, the hierarchy
//! performs exactly the flat averaging of local SGD. The two models agree
//! bit for bit.

use qmlhfl::engine::{self, RunOptions, Schedule};
use qmlhfl::quantizer::QuantizerSpec;
use qmlhfl::task::Task;
use qmlhfl::topology::Topology;

fn main() {
    let topology = Topology::from_parent_indices(
        &[7, 3, 2, 1],
        &[vec![0, 1, 2, 0, 1, 2, 2], vec![0, 1, 1], vec![0, 0]],
    )
    .unwrap();
    let task = Task::quadratic_synthetic(7, 5, (10, 30), 1.0, 0.8, 21).unwrap();
    let opts = RunOptions {
        mu: 0.05,
        batch_size: 6,
        weighted: true,
        seed: 5,
        round_latency: 1.0,
        initial: None,
    };
    let local_steps = 3;
    let rounds = 10;
    let tree = engine::run(
        &task,
        &topology,
        &Schedule::new(vec![local_steps, 1, 1], rounds).unwrap(),
        &[
            QuantizerSpec::identity(),
            QuantizerSpec::identity(),
            QuantizerSpec::identity(),
        ],
        &opts,
    )
    .unwrap();
    let flat = engine::run_fedavg_reference(&task, local_steps, rounds, &opts).unwrap();

    let same = tree
        .final_model
        .iter()
        .zip(flat.final_model.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("hierarchy: {:?}", tree.final_model.0);
    println!("flat:      {:?}", flat.final_model.0);
    println!("bit-identical: {same}");
}
