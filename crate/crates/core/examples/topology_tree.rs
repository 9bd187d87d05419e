//! Builds hierarchies three ways and prints their shape.
//!
//! Run with `cargo run --example topology_tree`.

use qmlhfl::topology::{ChildAssignment, NodeId, Topology};

fn describe(name: &str, t: &Topology) {
    println!(
        "{name}: layers {:?}, N = {}",
        t.layer_sizes(),
        t.num_layers()
    );
    println!("  servers per edge layer: {:?}", t.server_counts());
    for layer in 1..=t.num_layers() {
        let counts: Vec<usize> = (0..t.layer_size(layer))
            .map(|i| t.subtree_devices(NodeId::new(layer, i)))
            .collect();
        println!("  layer {layer} subtree sizes: {counts:?}");
    }
}

fn main() {
    let uniform = Topology::uniform(&[3, 2, 2, 2]).unwrap();
    describe("uniform fan-outs (3, 2, 2, 2)", &uniform);

    let ragged =
        Topology::from_parent_indices(&[7, 3, 1], &[vec![0, 0, 1, 1, 1, 2, 2], vec![0, 0, 0]])
            .unwrap();
    describe("explicit parents", &ragged);

    let listed = Topology::build(&[4, 2, 1], ChildAssignment::FanOut(vec![2, 2])).unwrap();
    describe("fan-out assignment", &listed);

    // dropping the lowest edge layer attaches devices to the layer above
    for k in 1..uniform.num_layers() {
        let reduced = uniform.reduce_depth(k).unwrap();
        println!(
            "uniform tree without its {k} lowest edge layer(s): {:?}",
            reduced.layer_sizes()
        );
    }
}
