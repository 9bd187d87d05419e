//! Per-round latency of the wireless hierarchy and the largest schedules
//! that meet a deadline.

use qmlhfl::latency::LatencyParams;

fn main() {
    let freqs: Vec<f64> = (0..12).map(|i| 0.5e9 + 0.125e9 * i as f64).collect();
    let mut lat = LatencyParams::reference(freqs, 40.0, 5.6724e6, 3);
    lat.rounds = 100;
    lat.deadline = 100.0 * 400.0;
    let t_cp = lat.compute_tcp();
    let t_de = lat.compute_tde().unwrap();
    println!("slowest device step t_CP = {t_cp:.2} s, device uplink t_DE = {t_de:.4} s");
    println!("inter-edge times: {:?}", lat.edge_times);

    println!("\n{:>12} {:>12} {:>8}", "taus", "round (s)", "meets");
    for taus in [
        [1.0, 1.0, 1.0],
        [4.0, 2.0, 2.0],
        [2.0, 2.0, 4.0],
        [8.0, 1.0, 2.0],
        [5.0, 2.0, 2.0],
    ] {
        let check = lat.deadline_ok(&taus).unwrap();
        println!(
            "{:>12} {:>12.2} {:>8}",
            format!("{taus:?}"),
            check.round_latency,
            check.ok
        );
    }

    // moving devices away from their server slows the uplink
    for kappa in [1.0, 5.0, 10.0, 25.0] {
        let mut far = lat.clone();
        far.kappa = kappa;
        println!(
            "kappa {kappa:>4}: t_DE = {:.2} s",
            far.compute_tde().unwrap()
        );
    }
}
