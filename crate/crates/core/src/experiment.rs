//! Orchestration: builds tasks from configs, drives the engine, the theory
//! evaluators and the optimizer, and writes artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{CompareConfig, ConfigError, RunConfig, TaskKind, ThresholdMetric};
use crate::engine::{self, EngineError, RunMetrics, RunOptions, Schedule};
use crate::latency::LatencyError;
use crate::optimizer::{self, ObjectiveSpec, OptimizerError, OptimizerResult, OptimizerSettings};
use crate::quantizer::{self, QuantizerSpec};
use crate::task::{self, LabeledPool, ModelKind, PartitionCase, Task, TaskError};
use crate::theory::{self, RateBound, TheoryError, TheoryParams};
use crate::topology::{Topology, TopologyError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("{0}")]
    Runtime(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl ExperimentError {
    /// Process exit code: 2 for configuration problems, 3 for infeasible
    /// problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Infeasible(_) => 3,
            _ => 1,
        }
    }
}

impl From<ConfigError> for ExperimentError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.0)
    }
}

impl From<TopologyError> for ExperimentError {
    fn from(e: TopologyError) -> Self {
        Self::Config(format!("topology: {e}"))
    }
}

impl From<TaskError> for ExperimentError {
    fn from(e: TaskError) -> Self {
        Self::Config(format!("task: {e}"))
    }
}

impl From<LatencyError> for ExperimentError {
    fn from(e: LatencyError) -> Self {
        Self::Config(format!("latency: {e}"))
    }
}

impl From<EngineError> for ExperimentError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Task(t) => t.into(),
            other => Self::Config(format!("engine: {other}")),
        }
    }
}

impl From<TheoryError> for ExperimentError {
    fn from(e: TheoryError) -> Self {
        match e {
            TheoryError::NoFeasibleMu => Self::Infeasible(e.to_string()),
            other => Self::Config(format!("theory: {other}")),
        }
    }
}

impl From<OptimizerError> for ExperimentError {
    fn from(e: OptimizerError) -> Self {
        match e {
            OptimizerError::NoFeasiblePoint { .. } | OptimizerError::RegimeViolation(_) => {
                Self::Infeasible(e.to_string())
            }
            OptimizerError::Subproblem(_) => Self::Runtime(format!("optimizer: {e}")),
            other => Self::Config(format!("optimizer: {other}")),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Builds the learning task described by `cfg` for `topology`.
pub fn build_task(cfg: &RunConfig, topology: &Topology) -> Result<Task, ExperimentError> {
    let t = &cfg.task;
    let devices = topology.num_devices();
    match t.kind {
        TaskKind::Quadratic => Ok(Task::quadratic_synthetic(
            devices,
            t.dim,
            t.size_range,
            t.center_scale,
            t.spread,
            cfg.seed,
        )?),
        TaskKind::Logistic | TaskKind::Mlp => {
            let pool = match &t.csv {
                Some(path) => LabeledPool::from_csv(path)?,
                None => LabeledPool::synthetic_blobs(
                    t.classes,
                    t.features,
                    t.per_class,
                    t.separation,
                    cfg.seed,
                ),
            };
            let (train, test) = pool.split(t.test_fraction, cfg.seed);
            let case = PartitionCase::from_index(t.case).ok_or_else(|| {
                ExperimentError::Config(format!("unknown partition case {}", t.case))
            })?;
            let data = task::partition(&train, topology, case, t.size_range, cfg.seed)?;
            let features = pool.features();
            let model = if t.kind == TaskKind::Logistic {
                ModelKind::Logistic {
                    features,
                    classes: pool.num_classes,
                }
            } else {
                ModelKind::TinyMlp {
                    features,
                    hidden: t.hidden,
                    classes: pool.num_classes,
                }
            };
            let mut task = Task::new(model, data)?;
            task.test = test;
            Ok(task)
        }
    }
}

/// Measures `q` for every stochastic quantizer that lacks one (or all, with
/// `remeasure`).
pub fn measure_quantizers(cfg: &mut RunConfig, dim: usize) -> Result<Vec<f64>, ExperimentError> {
    let trials = cfg.quantization.trials;
    let remeasure = cfg.quantization.remeasure;
    let seed = cfg.seed;
    for (layer, q) in cfg.quantizers.iter_mut().enumerate() {
        if q.is_identity() || (q.measured_q.is_some() && !remeasure) {
            continue;
        }
        quantizer::calibrate(q, dim, trials, seed.wrapping_add(layer as u64))
            .map_err(|e| ExperimentError::Config(format!("quantizer {}: {e}", layer + 1)))?;
    }
    Ok(cfg
        .quantizers
        .iter()
        .map(|q| q.q().unwrap_or(0.0))
        .collect())
}

/// Loaded and resolved experiment inputs.
pub struct Prepared {
    pub config: RunConfig,
    pub topology: Topology,
    pub task: Task,
    pub q: Vec<f64>,
}

pub fn prepare(raw: &RunConfig) -> Result<Prepared, ExperimentError> {
    let topology = raw.build_topology()?;
    let task = build_task(raw, &topology)?;
    let mut config = raw.resolve(&topology, task.dim())?;
    let q = measure_quantizers(&mut config, task.dim())?;
    Ok(Prepared {
        config,
        topology,
        task,
        q,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub lipschitz: f64,
    pub sigma2: f64,
    pub gap0: f64,
    pub mu: f64,
    pub q: Vec<f64>,
    pub taus: Vec<u32>,
    pub condition_lhs: f64,
    pub condition_holds: bool,
    pub max_feasible_mu: f64,
    pub bound: RateBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub t_cp: f64,
    pub t_de: f64,
    pub edge_times: Vec<f64>,
    pub round_latency: f64,
    pub total_time: f64,
    pub deadline_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub taus: Vec<u32>,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub result: OptimizerResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub taus: Vec<u32>,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    pub final_accuracy: Option<f64>,
    pub mean_grad_norm_sq: f64,
    pub initial_loss: f64,
    pub theory: TheoryReport,
    pub latency: LatencyReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizeReport>,
    /// The resolved configuration; this file alone reproduces the run.
    pub config: RunConfig,
}

pub fn objective_spec(p: &Prepared) -> Result<ObjectiveSpec, ExperimentError> {
    let latency = p.config.latency_params()?;
    let o = &p.config.optimizer;
    let mut spec = ObjectiveSpec::from_topology(&p.topology, p.q.clone(), latency, o.alpha);
    spec.speed_ref = o.speed_ref;
    spec.error_ref = o.error_ref;
    spec.tau_max = o.tau_max;
    Ok(spec)
}

pub fn optimize_report(p: &Prepared) -> Result<OptimizeReport, ExperimentError> {
    let spec = objective_spec(p)?;
    if p.config.latency.deadline.is_none() {
        return Err(ExperimentError::Config(
            "optimization needs latency.deadline".into(),
        ));
    }
    let settings = OptimizerSettings {
        tolerance: p.config.optimizer.tolerance,
        max_iters: p.config.optimizer.max_iters,
    };
    let result = optimizer::optimize(&spec, &settings)?;
    let oracle = if p.config.optimizer.oracle {
        let (taus, objective) = optimizer::brute_force(&spec, p.config.optimizer.oracle_tau_max)?;
        Some(OracleReport { taus, objective })
    } else {
        None
    };
    Ok(OptimizeReport { result, oracle })
}

/// Variance bound and initial gap: exact for the quadratic task, estimated
/// at `w_0` otherwise, unless the config pins them.
fn theory_inputs(p: &Prepared) -> Result<(f64, f64), ExperimentError> {
    let cfg = &p.config;
    let weighted = cfg.training.weighted;
    let batch = cfg.training.batch_size;
    let w0 = p.task.init_params(cfg.seed);
    let sigma2 = match cfg.theory.sigma2 {
        Some(v) => v,
        None => match p.task.quadratic_gradient_variance(batch) {
            Some(v) => v,
            None => p
                .task
                .estimate_gradient_variance(&w0, batch, 200, cfg.seed)?,
        },
    };
    let gap0 = match cfg.theory.gap0 {
        Some(v) => v,
        None => {
            let f0 = p.task.global_loss_flat(&w0, weighted)?;
            match p.task.quadratic_optimum(weighted) {
                Some(w) => (f0 - p.task.global_loss_flat(&w, weighted)?).max(0.0),
                None => f0,
            }
        }
    };
    Ok((sigma2, gap0))
}

pub fn theory_report(p: &Prepared, taus: &[u32]) -> Result<TheoryReport, ExperimentError> {
    let cfg = &p.config;
    let (sigma2, gap0) = theory_inputs(p)?;
    let params = TheoryParams {
        lipschitz: cfg.theory.lipschitz,
        sigma2,
        mu: cfg.training.mu,
        gap0,
        q: p.q.clone(),
        taus: taus.iter().map(|&t| t as f64).collect(),
    };
    let lhs = theory::condition_lhs(&params, &p.topology)?;
    Ok(TheoryReport {
        lipschitz: params.lipschitz,
        sigma2,
        gap0,
        mu: params.mu,
        q: params.q.clone(),
        taus: taus.to_vec(),
        condition_lhs: lhs,
        condition_holds: lhs >= 0.0,
        max_feasible_mu: theory::max_feasible_mu(&params, &p.topology)?,
        bound: theory::rate_bound(&params, &p.topology, cfg.schedule.rounds)?,
    })
}

pub fn latency_report(p: &Prepared, taus: &[u32]) -> Result<LatencyReport, ExperimentError> {
    let lp = p.config.latency_params()?;
    let t: Vec<f64> = taus.iter().map(|&v| v as f64).collect();
    let check = lp.deadline_ok(&t)?;
    Ok(LatencyReport {
        t_cp: lp.compute_tcp(),
        t_de: lp.compute_tde()?,
        edge_times: lp.edge_times.clone(),
        round_latency: check.round_latency,
        total_time: check.round_latency * lp.rounds as f64,
        deadline_ok: check.ok,
    })
}

pub struct RunOutput {
    pub metrics: RunMetrics,
    pub summary: Summary,
}

/// Full pipeline: measure `q`, optionally optimize the schedule, train,
/// evaluate the theory. Writes nothing.
pub fn run_prepared(p: &mut Prepared) -> Result<RunOutput, ExperimentError> {
    let optimizer = if p.config.schedule.optimize {
        let rep = optimize_report(p)?;
        p.config.schedule.taus = rep.result.taus_integer.clone();
        Some(rep)
    } else {
        None
    };
    let taus = p.config.schedule.taus.clone();
    let latency = latency_report(p, &taus)?;
    let schedule = Schedule::new(taus.clone(), p.config.schedule.rounds)?;
    let opts = RunOptions {
        mu: p.config.training.mu,
        batch_size: p.config.training.batch_size,
        weighted: p.config.training.weighted,
        seed: p.config.seed,
        round_latency: latency.round_latency,
        initial: None,
    };
    let metrics = engine::run(&p.task, &p.topology, &schedule, &p.config.quantizers, &opts)?;
    let theory = theory_report(p, &taus)?;
    let last = metrics.rounds.last().unwrap_or(&metrics.initial);
    let summary = Summary {
        taus,
        final_loss: last.loss,
        final_grad_norm_sq: last.grad_norm_sq,
        final_accuracy: metrics.final_accuracy,
        mean_grad_norm_sq: metrics.mean_grad_norm_sq(),
        initial_loss: metrics.initial.loss,
        theory,
        latency,
        optimizer,
        config: p.config.clone(),
    };
    Ok(RunOutput { metrics, summary })
}

pub fn metrics_csv(metrics: &RunMetrics) -> String {
    let mut out = String::from("round,loss,grad_norm_sq,latency,cumulative_time\n");
    for r in &metrics.rounds {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.round, r.loss, r.grad_norm_sq, r.latency, r.cumulative_time
        ));
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| io_err(path, e))
}

/// Runs the experiment and writes `metrics.csv`, `summary.json` and
/// `resolved_config.toml` into the configured output directory.
pub fn run_experiment(raw: &RunConfig) -> Result<RunOutput, ExperimentError> {
    let mut p = prepare(raw)?;
    let out = run_prepared(&mut p)?;
    let dir = &p.config.output.dir;
    write_file(&dir.join("metrics.csv"), &metrics_csv(&out.metrics))?;
    let json = serde_json::to_string_pretty(&out.summary)
        .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    write_file(&dir.join("summary.json"), &json)?;
    write_file(&dir.join("resolved_config.toml"), &p.config.to_toml())?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    pub taus: Vec<u32>,
    pub kappa: f64,
    pub round_latency: f64,
    pub rounds_to_threshold: Option<u32>,
    pub time_to_threshold: Option<f64>,
    pub final_loss: f64,
}

/// Trains every depth variant of `compare` on the same devices and data:
/// the lowest edge layers of the base tree are removed, the device hop is
/// scaled by the variant's `kappa`, and the surviving inter-edge times are
/// kept.
pub fn compare_depths(
    p: &Prepared,
    compare: &CompareConfig,
) -> Result<Vec<DepthRow>, ExperimentError> {
    let base_layers = p.topology.num_layers();
    let base_latency = p.config.latency_params()?;
    let mut rows = Vec::with_capacity(compare.depth.len());
    for d in &compare.depth {
        if d.layers == 0 || d.layers > base_layers {
            return Err(ExperimentError::Config(format!(
                "depth {} outside 1..={base_layers}",
                d.layers
            )));
        }
        let removed = base_layers - d.layers;
        let topology = if removed == 0 {
            p.topology.clone()
        } else {
            p.topology.reduce_depth(removed)?
        };
        let quantizers: Vec<QuantizerSpec> = match &d.quantizers {
            Some(q) => q.clone(),
            None => p.config.quantizers[..d.layers].to_vec(),
        };
        let mut lat = base_latency.clone();
        lat.kappa = d.kappa;
        lat.edge_times = base_latency.edge_times[removed..].to_vec();
        let t: Vec<f64> = d.taus.iter().map(|&v| v as f64).collect();
        let round_latency = lat.round_latency(&t)?;
        let schedule = Schedule::new(d.taus.clone(), p.config.schedule.rounds)?;
        let opts = RunOptions {
            mu: p.config.training.mu,
            batch_size: p.config.training.batch_size,
            weighted: p.config.training.weighted,
            seed: p.config.seed,
            round_latency,
            initial: None,
        };
        let m = engine::run(&p.task, &topology, &schedule, &quantizers, &opts)?;
        let hit = match compare.metric {
            ThresholdMetric::GradNormSq => m.rounds_to_grad_threshold(compare.threshold),
            ThresholdMetric::Loss => m.rounds_to_loss_threshold(compare.threshold),
        };
        rows.push(DepthRow {
            depth: d.layers,
            taus: d.taus.clone(),
            kappa: d.kappa,
            round_latency,
            rounds_to_threshold: hit,
            time_to_threshold: hit.map(|r| r as f64 * round_latency),
            final_loss: m.final_loss(),
        });
    }
    Ok(rows)
}

pub fn depth_csv(rows: &[DepthRow]) -> String {
    let mut out = String::from(
        "depth,taus,kappa,round_latency,rounds_to_threshold,time_to_threshold,final_loss\n",
    );
    for r in rows {
        let taus: Vec<String> = r.taus.iter().map(u32::to_string).collect();
        let opt = |v: Option<String>| v.unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.depth,
            taus.join(" "),
            r.kappa,
            r.round_latency,
            opt(r.rounds_to_threshold.map(|v| v.to_string())),
            opt(r.time_to_threshold.map(|v| v.to_string())),
            r.final_loss
        ));
    }
    out
}

/// Runs the comparison and writes `depths.csv` into the output directory.
pub fn compare_depths_experiment(raw: &RunConfig) -> Result<Vec<DepthRow>, ExperimentError> {
    let p = prepare(raw)?;
    let compare = p
        .config
        .compare
        .clone()
        .ok_or_else(|| ExperimentError::Config("config has no [compare] section".into()))?;
    let rows = compare_depths(&p, &compare)?;
    write_file(&p.config.output.dir.join("depths.csv"), &depth_csv(&rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredQuantizer {
    pub layer: usize,
    pub kind: quantizer::QuantizerKind,
    pub levels: u32,
    pub q: f64,
}

/// Measures every layer's quantizer at the task's model dimension.
pub fn measure_q_report(raw: &RunConfig) -> Result<Vec<MeasuredQuantizer>, ExperimentError> {
    let mut cfg = raw.clone();
    cfg.quantization.remeasure = true;
    let p = prepare(&cfg)?;
    Ok(p.config
        .quantizers
        .iter()
        .enumerate()
        .map(|(i, q)| MeasuredQuantizer {
            layer: i + 1,
            kind: q.kind,
            levels: q.levels,
            q: q.q().unwrap_or(0.0),
        })
        .collect())
}
