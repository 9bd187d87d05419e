//! Trains the same 24 devices under hierarchies of depth 4, 3, 2 and 1.
//! The product of counts is fixed at 16. Shallower trees put devices
//! farther from their server, so the uplink slows and the time to reach
//! the target gradient norm grows.

use qmlhfl::config::{CompareConfig, DepthConfig, RunConfig, ThresholdMetric};
use qmlhfl::experiment;

const CONFIG: &str = r#"
seed = 5
[topology]
fan_outs = [3, 2, 2, 2]
[task]
kind = "quadratic"
dim = 4
[schedule]
taus = [2, 2, 2, 2]
rounds = 100
[training]
mu = 0.02
batch_size = 8
[latency]
model_bits = 5.6724e6
edge_time_multiples = [10.0, 20.0, 30.0]
"#;

fn main() {
    let cfg = RunConfig::from_toml(CONFIG).unwrap();
    let prepared = experiment::prepare(&cfg).unwrap();
    let variant = |layers, taus: Vec<u32>, kappa| DepthConfig {
        layers,
        taus,
        kappa,
        quantizers: None,
    };
    let compare = CompareConfig {
        threshold: 1e-3,
        metric: ThresholdMetric::GradNormSq,
        depth: vec![
            variant(4, vec![2, 2, 2, 2], 1.0),
            variant(3, vec![4, 2, 2], 10.0),
            variant(2, vec![8, 2], 15.0),
            variant(1, vec![16], 25.0),
        ],
    };
    let rows = experiment::compare_depths(&prepared, &compare).unwrap();
    print!("{}", experiment::depth_csv(&rows));
}
