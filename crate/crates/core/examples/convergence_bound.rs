//! Evaluates the convergence condition and the rate bound for a
//! three-layer tree, then sweeps the learning rate up to the largest
//! feasible value.

use qmlhfl::theory::{self, TheoryParams};
use qmlhfl::topology::Topology;

fn main() {
    let topology = Topology::uniform(&[4, 3, 2]).unwrap();
    let params = TheoryParams {
        lipschitz: 5.0,
        sigma2: 0.1,
        mu: 0.01,
        gap0: 2.0,
        q: vec![0.2, 0.1, 0.05],
        taus: vec![4.0, 2.0, 2.0],
    };
    for layer in 1..topology.num_layers() {
        println!(
            "A at layer {layer}: {:.3}",
            theory::recursion_a(&params, &topology, layer).unwrap()
        );
    }
    let mu_max = theory::max_feasible_mu(&params, &topology).unwrap();
    println!("largest feasible learning rate: {mu_max:.5}");

    println!(
        "\n{:>9} {:>10} {:>11} {:>11} {:>11}",
        "mu", "condition", "speed", "error", "total"
    );
    for frac in [0.1, 0.25, 0.5, 0.75, 0.99] {
        let p = params.with_mu(frac * mu_max);
        let lhs = theory::condition_lhs(&p, &topology).unwrap();
        let b = theory::rate_bound(&p, &topology, 500).unwrap();
        println!(
            "{:>9.5} {lhs:>10.4} {:>11.4e} {:>11.4e} {:>11.4e}",
            p.mu, b.speed_term, b.error_term, b.total
        );
    }

    // with two layers the general form reduces to the closed expressions
    let two = Topology::uniform(&[5, 3]).unwrap();
    let p2 = TheoryParams {
        q: vec![0.3, 0.1],
        taus: vec![3.0, 4.0],
        ..params.clone()
    };
    println!(
        "\ntwo layers: general {:.12}, closed {:.12}",
        theory::rate_bound(&p2, &two, 100).unwrap().total,
        theory::corollary2_bound(&p2, &two, 100).unwrap().total
    );
}
