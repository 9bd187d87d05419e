//! Training engine invariants.

use proptest::prelude::*;
use qmlhfl::engine::{self, layer_masses, Observer, RunOptions, RunState, Schedule};
use qmlhfl::quantizer::QuantizerSpec;
use qmlhfl::task::Task;
use qmlhfl::topology::{NodeId, Topology};

fn opts(seed: u64, weighted: bool) -> RunOptions {
    RunOptions {
        mu: 0.05,
        batch_size: 5,
        weighted,
        seed,
        round_latency: 2.0,
        initial: None,
    }
}

struct BroadcastCheck {
    broadcasts: usize,
    inconsistent: Vec<NodeId>,
    rounds: Vec<u32>,
}

impl Observer for BroadcastCheck {
    fn on_broadcast(&mut self, topology: &Topology, node: NodeId, state: &RunState) {
        self.broadcasts += 1;
        if !state.subtree_consistent(topology, node) {
            self.inconsistent.push(node);
        }
    }

    fn on_round(&mut self, state: &RunState) {
        self.rounds.push(state.round);
    }
}

#[test]
fn broadcast_reaches_the_whole_subtree() {
    let topo = Topology::uniform(&[2, 3, 2]).unwrap();
    let task = Task::quadratic_synthetic(12, 3, (10, 20), 1.0, 0.5, 1).unwrap();
    let quantizers = [4, 8, 16].map(|s| QuantizerSpec::stochastic(s).unwrap());
    let schedule = Schedule::new(vec![2, 3, 2], 4).unwrap();
    let mut obs = BroadcastCheck {
        broadcasts: 0,
        inconsistent: Vec::new(),
        rounds: Vec::new(),
    };
    engine::run_with_observer(
        &task,
        &topo,
        &schedule,
        &quantizers,
        &opts(3, false),
        &mut obs,
    )
    .unwrap();
    assert!(obs.inconsistent.is_empty(), "{:?}", obs.inconsistent);
    // per round: the cloud once, each layer-2 server 2 times, each layer-1 server 3 * 2 times
    assert_eq!(obs.broadcasts, 4 * (1 + 2 * 2 + 6 * 3 * 2));
    assert_eq!(obs.rounds, vec![1, 2, 3, 4]);
}

#[test]
fn runs_are_reproducible_from_the_seed() {
    let topo = Topology::uniform(&[3, 2]).unwrap();
    let task = Task::quadratic_synthetic(6, 4, (10, 20), 1.0, 0.5, 2).unwrap();
    let q = [
        QuantizerSpec::stochastic(3).unwrap(),
        QuantizerSpec::stochastic(5).unwrap(),
    ];
    let s = Schedule::new(vec![3, 2], 6).unwrap();
    let a = engine::run(&task, &topo, &s, &q, &opts(9, true)).unwrap();
    let b = engine::run(&task, &topo, &s, &q, &opts(9, true)).unwrap();
    let c = engine::run(&task, &topo, &s, &q, &opts(10, true)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.final_model, c.final_model);
}

#[test]
fn cumulative_time_follows_the_round_latency() {
    let topo = Topology::uniform(&[4]).unwrap();
    let task = Task::quadratic_synthetic(4, 2, (10, 20), 1.0, 0.5, 2).unwrap();
    let m = engine::run(
        &task,
        &topo,
        &Schedule::new(vec![2], 5).unwrap(),
        &[QuantizerSpec::identity()],
        &opts(1, false),
    )
    .unwrap();
    let times: Vec<f64> = m.rounds.iter().map(|r| r.cumulative_time).collect();
    assert_eq!(times, vec![2.0, 4.0, 6.0, 8.0, 10.0]);
    assert_eq!(m.initial.cumulative_time, 0.0);
}

#[test]
fn single_layer_matches_flat_averaging() {
    let topo = Topology::uniform(&[5]).unwrap();
    let task = Task::quadratic_synthetic(5, 3, (8, 16), 1.0, 0.5, 4).unwrap();
    let o = opts(6, true);
    let tree = engine::run(
        &task,
        &topo,
        &Schedule::new(vec![4], 7).unwrap(),
        &[QuantizerSpec::identity()],
        &o,
    )
    .unwrap();
    let flat = engine::run_fedavg_reference(&task, 4, 7, &o).unwrap();
    assert_eq!(tree.final_model, flat.final_model);
}

#[test]
fn noiseless_gradient_descent_converges() {
    // full batches make every step exact gradient descent
    let task = Task::quadratic_synthetic(4, 3, (5, 5), 1.0, 0.5, 8).unwrap();
    let topo = Topology::uniform(&[2, 2]).unwrap();
    let o = RunOptions {
        batch_size: 5,
        mu: 0.1,
        ..opts(0, false)
    };
    let m = engine::run(
        &task,
        &topo,
        &Schedule::new(vec![2, 2], 60).unwrap(),
        &vec![QuantizerSpec::identity(); 2],
        &o,
    )
    .unwrap();
    let w_star = task.quadratic_optimum(false).unwrap();
    for (a, b) in m.final_model.iter().zip(w_star.iter()) {
        assert!((a - b).abs() < 1e-8);
    }
    assert!(m.rounds.windows(2).all(|w| w[1].loss <= w[0].loss + 1e-12));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let topo = Topology::uniform(&[2, 2]).unwrap();
    let task = Task::quadratic_synthetic(4, 2, (5, 5), 1.0, 0.5, 8).unwrap();
    let s = Schedule::new(vec![1, 1], 2).unwrap();
    assert!(engine::run(
        &task,
        &topo,
        &s,
        &[QuantizerSpec::identity()],
        &opts(0, false)
    )
    .is_err());
    let short = Schedule::new(vec![1], 2).unwrap();
    assert!(engine::run(
        &task,
        &topo,
        &short,
        &vec![QuantizerSpec::identity(); 2],
        &opts(0, false)
    )
    .is_err());
    let bad_mu = RunOptions {
        mu: -1.0,
        ..opts(0, false)
    };
    assert!(engine::run(
        &task,
        &topo,
        &s,
        &vec![QuantizerSpec::identity(); 2],
        &bad_mu
    )
    .is_err());
}

fn random_tree() -> impl Strategy<Value = Topology> {
    (2usize..10, 1usize..4).prop_flat_map(|(devices, edges)| {
        let edges = edges.min(devices);
        prop::collection::vec(0..edges, devices - edges).prop_map(move |extra| {
            let mut parents: Vec<usize> = (0..edges).collect();
            parents.extend(extra);
            Topology::from_parent_indices(&[devices, edges, 1], &[parents, vec![0; edges]]).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masses_are_conserved_up_the_tree(topo in random_tree(), weighted in any::<bool>(), seed in 0u64..100) {
        let task = Task::quadratic_synthetic(topo.num_devices(), 2, (3, 12), 1.0, 0.5, seed).unwrap();
        let masses = layer_masses(&task, &topo, weighted);
        let total: f64 = masses[0].iter().sum();
        for row in &masses {
            prop_assert_eq!(row.iter().sum::<f64>(), total);
        }
        prop_assert_eq!(masses.last().unwrap().len(), 1);
    }

    #[test]
    fn identity_tree_collapses(topo in random_tree(), steps in 1u32..4, weighted in any::<bool>(), seed in 0u64..100) {
        let task = Task::quadratic_synthetic(topo.num_devices(), 3, (3, 12), 1.0, 0.5, seed).unwrap();
        let o = RunOptions { batch_size: 2, ..opts(seed, weighted) };
        let tree = engine::run(&task, &topo, &Schedule::new(vec![steps, 1], 3).unwrap(), &vec![QuantizerSpec::identity(); 2], &o).unwrap();
        let flat = engine::run_fedavg_reference(&task, steps, 3, &o).unwrap();
        prop_assert_eq!(tree.final_model, flat.final_model);
    }
}
