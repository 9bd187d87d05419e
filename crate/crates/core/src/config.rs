//! TOML experiment configuration and its fully resolved form.
//!
//! [`RunConfig::resolve`] fills every default (including values drawn from
//! the seed, such as CPU frequencies) so that the echoed configuration
//! re-runs bit-identically.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::latency::{LatencyParams, DEFAULT_PATH_LOSS_EXP};
use crate::quantizer::{QuantizerKind, QuantizerSpec};
use crate::rng::{self, Domain};
use crate::topology::{Topology, TopologyDoc};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub topology: TopologyConfig,
    pub task: TaskConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    /// One entry per layer; identity everywhere when empty.
    #[serde(default)]
    pub quantizers: Vec<QuantizerSpec>,
    #[serde(default)]
    pub quantization: QuantizationConfig,
    #[serde(default)]
    pub latency: LatencyConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub compare: Option<CompareConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    /// Uniform tree, devices per layer-1 server first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fan_outs: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parents: Option<Vec<Vec<usize>>>,
    /// JSON file holding `layer_sizes` and `parents`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Quadratic,
    Logistic,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Samples per device, inclusive range.
    #[serde(default = "default_size_range")]
    pub size_range: (usize, usize),
    /// Quadratic: parameter dimension.
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "one")]
    pub center_scale: f64,
    #[serde(default = "half")]
    pub spread: f64,
    /// Classification: heterogeneity case 1 (two classes), 2 (six) or 3 (all).
    #[serde(default = "default_case")]
    pub case: u8,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Synthetic pool size per class.
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Labeled CSV replacing the synthetic pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub taus: Vec<u32>,
    pub rounds: u32,
    /// Replace `taus` with the optimizer's integer solution.
    #[serde(default)]
    pub optimize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weighted: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mu: default_mu(),
            batch_size: default_batch(),
            weighted: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizationConfig {
    /// Trials per probe direction when measuring `q`.
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Re-measure even when a quantizer already carries a value.
    #[serde(default)]
    pub remeasure: bool,
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        Self {
            trials: default_trials(),
            remeasure: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles_per_sample: Option<f64>,
    /// Explicit per-device frequencies; drawn from `cpu_freq_range` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_freqs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_freq_range: Option<(f64, f64)>,
    /// Model payload in bits; 32 bits per parameter when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_bits: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_power: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_gain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_power: Option<f64>,
    /// Absolute inter-edge times in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_times: Option<Vec<f64>>,
    /// Inter-edge times as multiples of the device hop time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_time_multiples: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_loss_exp: Option<f64>,
    /// Completion deadline in seconds; unconstrained when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "one")]
    pub speed_ref: f64,
    #[serde(default = "one")]
    pub error_ref: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_max: Option<u32>,
    /// Also run the exhaustive search and report its optimum.
    #[serde(default)]
    pub oracle: bool,
    /// Per-layer cap for the exhaustive search.
    #[serde(default = "default_oracle_cap")]
    pub oracle_tau_max: u32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tolerance: default_tolerance(),
            max_iters: default_max_iters(),
            speed_ref: 1.0,
            error_ref: 1.0,
            tau_max: None,
            oracle: false,
            oracle_tau_max: default_oracle_cap(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(default = "one")]
    pub lipschitz: f64,
    /// Gradient-variance bound; computed (quadratic) or estimated otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    /// `F(w_0) - F(w*)`; exact for the quadratic task, `F(w_0)` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap0: Option<f64>,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            lipschitz: 1.0,
            sigma2: None,
            gap0: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMetric {
    GradNormSq,
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub threshold: f64,
    #[serde(default = "default_metric")]
    pub metric: ThresholdMetric,
    pub depth: Vec<DepthConfig>,
}

/// One variant of a depth comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthConfig {
    pub layers: usize,
    pub taus: Vec<u32>,
    #[serde(default = "one")]
    pub kappa: f64,
    /// Quantizers of the variant; the lowest `layers` base quantizers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantizers: Option<Vec<QuantizerSpec>>,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn default_size_range() -> (usize, usize) {
    (20, 40)
}
fn default_dim() -> usize {
    4
}
fn default_case() -> u8 {
    3
}
fn default_classes() -> usize {
    10
}
fn default_features() -> usize {
    8
}
fn default_hidden() -> usize {
    16
}
fn default_per_class() -> usize {
    400
}
fn default_separation() -> f64 {
    2.0
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_mu() -> f64 {
    0.01
}
fn default_batch() -> usize {
    40
}
fn default_trials() -> usize {
    2000
}
fn default_tolerance() -> f64 {
    1e-8
}
fn default_max_iters() -> usize {
    200
}
fn default_oracle_cap() -> u32 {
    32
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_metric() -> ThresholdMetric {
    ThresholdMetric::GradNormSq
}

/// Reference wireless constants.
pub const REF_CYCLES: f64 = 0.25e9;
pub const REF_BANDWIDTH: f64 = 1e6;
pub const REF_TX_POWER: f64 = 0.5;
pub const REF_GAIN: f64 = 1e-8;
pub const REF_NOISE: f64 = 1e-10;
pub const REF_FREQ_RANGE: (f64, f64) = (0.5e9, 2e9);

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

impl RunConfig {
    /// Reads a TOML config, or a `summary.json` whose `config` field holds a
    /// resolved config. Relative paths inside resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            let inner = v.get("config").cloned().unwrap_or(v);
            serde_json::from_value(inner)
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
        } else {
            Self::from_toml(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase_paths(base);
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    fn rebase_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(f) = self.topology.file.as_mut() {
            fix(f);
        }
        if let Some(f) = self.task.csv.as_mut() {
            fix(f);
        }
    }

    pub fn build_topology(&self) -> Result<Topology, ConfigError> {
        let t = &self.topology;
        let sources = [
            t.fan_outs.is_some(),
            t.layer_sizes.is_some() || t.parents.is_some(),
            t.file.is_some(),
        ];
        if sources.iter().filter(|s| **s).count() != 1 {
            return err("topology needs exactly one of fan_outs, layer_sizes + parents, or file");
        }
        let res = if let Some(f) = &t.fan_outs {
            Topology::uniform(f)
        } else if let Some(path) = &t.file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            let doc: TopologyDoc = serde_json::from_str(&text)
                .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            doc.to_topology()
        } else {
            match (&t.layer_sizes, &t.parents) {
                (Some(s), Some(p)) => Topology::from_parent_indices(s, p),
                _ => return err("layer_sizes and parents must be given together"),
            }
        };
        res.map_err(|e| ConfigError(format!("topology: {e}")))
    }

    /// Fills every default, draws seed-dependent hardware values, and
    /// checks lengths against the topology. `dim` is the model dimension.
    pub fn resolve(&self, topology: &Topology, dim: usize) -> Result<RunConfig, ConfigError> {
        let mut c = self.clone();
        let n = topology.num_layers();
        if c.quantizers.is_empty() {
            c.quantizers = vec![QuantizerSpec::identity(); n];
        }
        if c.quantizers.len() != n {
            return err(format!("{} quantizers for {n} layers", c.quantizers.len()));
        }
        for (i, q) in c.quantizers.iter_mut().enumerate() {
            q.validate()
                .map_err(|e| ConfigError(format!("quantizer {}: {e}", i + 1)))?;
            if q.kind == QuantizerKind::Identity {
                q.measured_q = Some(0.0);
            }
        }
        if !c.schedule.optimize && c.schedule.taus.len() != n {
            return err(format!(
                "schedule.taus has {} entries for {n} layers",
                c.schedule.taus.len()
            ));
        }
        if c.schedule.rounds == 0 || c.schedule.taus.contains(&0) {
            return err("rounds and every tau must be at least 1");
        }
        if !(c.training.mu > 0.0) {
            return err("training.mu must be positive");
        }
        if c.training.batch_size == 0 {
            return err("training.batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&c.optimizer.alpha) {
            return err("optimizer.alpha must lie in [0, 1]");
        }
        if c.task.case == 0 || c.task.case > 3 {
            return err("task.case must be 1, 2 or 3");
        }
        let l = &mut c.latency;
        l.cycles_per_sample.get_or_insert(REF_CYCLES);
        l.bandwidth.get_or_insert(REF_BANDWIDTH);
        l.tx_power.get_or_insert(REF_TX_POWER);
        l.channel_gain.get_or_insert(REF_GAIN);
        l.noise_power.get_or_insert(REF_NOISE);
        l.kappa.get_or_insert(1.0);
        l.path_loss_exp.get_or_insert(DEFAULT_PATH_LOSS_EXP);
        l.model_bits.get_or_insert(32.0 * dim as f64);
        let range = *l.cpu_freq_range.get_or_insert(REF_FREQ_RANGE);
        if l.cpu_freqs.is_none() {
            l.cpu_freqs = Some(draw_frequencies(self.seed, topology.num_devices(), range)?);
        }
        if l.cpu_freqs
            .as_ref()
            .is_some_and(|f| f.len() != topology.num_devices())
        {
            return err("latency.cpu_freqs needs one entry per device");
        }
        if l.edge_times.is_none() {
            let mults = l
                .edge_time_multiples
                .clone()
                .unwrap_or_else(|| (1..n).map(|k| 10.0 * k as f64).collect());
            if mults.len() + 1 != n {
                return err(format!("edge_time_multiples needs {} entries", n - 1));
            }
            let probe = c.latency_params_unchecked(1);
            let tde = probe
                .compute_tde()
                .map_err(|e| ConfigError(e.to_string()))?;
            c.latency.edge_times = Some(mults.iter().map(|m| m * tde).collect());
        }
        if c.latency
            .edge_times
            .as_ref()
            .is_some_and(|e| e.len() + 1 != n)
        {
            return err(format!("latency.edge_times needs {} entries", n - 1));
        }
        c.latency_params()?;
        Ok(c)
    }

    fn latency_params_unchecked(&self, rounds: u32) -> LatencyParams {
        let l = &self.latency;
        LatencyParams {
            cycles_per_sample: l.cycles_per_sample.unwrap_or(REF_CYCLES),
            cpu_freqs: l.cpu_freqs.clone().unwrap_or_default(),
            batch_size: self.training.batch_size as f64,
            model_bits: l.model_bits.unwrap_or(0.0),
            bandwidth: l.bandwidth.unwrap_or(REF_BANDWIDTH),
            tx_power: l.tx_power.unwrap_or(REF_TX_POWER),
            channel_gain: l.channel_gain.unwrap_or(REF_GAIN),
            noise_power: l.noise_power.unwrap_or(REF_NOISE),
            edge_times: l.edge_times.clone().unwrap_or_default(),
            kappa: l.kappa.unwrap_or(1.0),
            path_loss_exp: l.path_loss_exp.unwrap_or(DEFAULT_PATH_LOSS_EXP),
            deadline: l.deadline.unwrap_or(f64::INFINITY),
            rounds,
        }
    }

    /// Latency constants of a resolved config.
    pub fn latency_params(&self) -> Result<LatencyParams, ConfigError> {
        let p = self.latency_params_unchecked(self.schedule.rounds);
        p.validate()
            .map_err(|e| ConfigError(format!("latency: {e}")))?;
        Ok(p)
    }
}

fn draw_frequencies(
    seed: u64,
    devices: usize,
    (lo, hi): (f64, f64),
) -> Result<Vec<f64>, ConfigError> {
    use rand::Rng;
    if !(lo > 0.0 && lo <= hi) {
        return err(format!("invalid cpu_freq_range [{lo}, {hi}]"));
    }
    let mut r = rng::stream(seed, Domain::Hardware, &[]);
    Ok((0..devices)
        .map(|_| if lo == hi { lo } else { r.random_range(lo..hi) })
        .collect())
}
