//! Stochastic level quantizers: unbiasedness and the variance constant `q`.
//!
//! Prints the measured `q` for several level counts next to the analytic
//! bound `min(d / s^2, sqrt(d) / s)`.

use qmlhfl::quantizer::{self, QuantizerSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let x = vec![0.8, -0.3, 0.1, 0.5];
    let spec = QuantizerSpec::stochastic(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let trials = 20_000;
    let mut mean = vec![0.0; x.len()];
    for _ in 0..trials {
        for (m, y) in mean.iter_mut().zip(spec.quantize(&x, &mut rng).unwrap()) {
            *m += y / trials as f64;
        }
    }
    println!("input     {x:?}");
    println!("mean of Q {mean:.4?}");

    println!("\n{:>4} {:>4} {:>10} {:>10}", "d", "s", "measured", "bound");
    for d in [4usize, 16, 64] {
        for s in [2u32, 4, 8, 16] {
            let spec = QuantizerSpec::stochastic(s).unwrap();
            let measured = quantizer::measure_q(&spec, d, 5_000, 1).unwrap();
            let bound = (d as f64 / (s * s) as f64).min((d as f64).sqrt() / s as f64);
            println!("{d:>4} {s:>4} {measured:>10.4} {bound:>10.4}");
        }
    }
}
