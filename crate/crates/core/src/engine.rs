//! Nested multi-layer training loop with quantized delta aggregation.
//!
//! Devices run `tau_1` SGD steps. A server at layer `n < N` runs `tau_{n+1}`
//! iterations; each iteration broadcasts its model to the subtree, lets the
//! children run, and then adds the mass-weighted quantized child deltas to
//! its model. The cloud aggregates once per global round.
//!
//! Aggregates are held exactly (anchor plus an exact numerator over the node
//! mass) and rounded once when a model is materialized. With identity
//! quantizers the numerator travels upward unrounded, so a tree whose upper
//! layers iterate once produces the same bits as a flat average.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exact::ExactVec;
use crate::quantizer::{QuantizerError, QuantizerSpec};
use crate::rng::{self, Domain};
use crate::task::{ParamVector, Task, TaskError};
use crate::topology::{NodeId, Topology};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("model has dimension {found}, task expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{found} quantizers given for {layers} layers")]
    QuantizerCountMismatch { layers: usize, found: usize },
    #[error("schedule has {found} intra-layer counts for {layers} layers")]
    ScheduleLength { layers: usize, found: usize },
    #[error("schedule entries must be at least 1 and rounds positive")]
    InvalidSchedule,
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
}

/// Intra-layer counts and the number of global rounds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub taus: Vec<u32>,
    pub rounds: u32,
}

impl Schedule {
    pub fn new(taus: Vec<u32>, rounds: u32) -> Result<Self, EngineError> {
        let s = Self { taus, rounds };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.taus.is_empty() || self.taus.contains(&0) || self.rounds == 0 {
            return Err(EngineError::InvalidSchedule);
        }
        Ok(())
    }

    /// Device SGD steps per global round.
    pub fn steps_per_round(&self) -> u64 {
        self.taus.iter().map(|&t| t as u64).product()
    }

    pub fn taus_f64(&self) -> Vec<f64> {
        self.taus.iter().map(|&t| t as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub mu: f64,
    /// Mini-batch size; clamped per device to its dataset size.
    pub batch_size: usize,
    /// Weight by dataset size instead of device count.
    #[serde(default)]
    pub weighted: bool,
    pub seed: u64,
    /// Seconds per global round, used for the simulated clock.
    #[serde(default)]
    pub round_latency: f64,
    /// Starting model; drawn from the task's initializer when absent.
    #[serde(default)]
    pub initial: Option<ParamVector>,
}

/// Metrics at one global iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub latency: f64,
    pub cumulative_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// The starting point `w_0`.
    pub initial: RoundRecord,
    /// One record per global round, measured after its update.
    pub rounds: Vec<RoundRecord>,
    pub final_model: ParamVector,
    pub final_accuracy: Option<f64>,
}

impl RunMetrics {
    /// Mean squared gradient norm over `w_0 .. w_{T-1}`, the quantity the
    /// rate bound controls.
    pub fn mean_grad_norm_sq(&self) -> f64 {
        let t = self.rounds.len();
        if t == 0 {
            return self.initial.grad_norm_sq;
        }
        let mut acc = self.initial.grad_norm_sq;
        for r in &self.rounds[..t - 1] {
            acc += r.grad_norm_sq;
        }
        acc / t as f64
    }

    /// First round whose squared gradient norm is at or below `threshold`
    /// (0 when `w_0` already qualifies).
    pub fn rounds_to_grad_threshold(&self, threshold: f64) -> Option<u32> {
        self.first_round(|r| r.grad_norm_sq <= threshold)
    }

    pub fn rounds_to_loss_threshold(&self, threshold: f64) -> Option<u32> {
        self.first_round(|r| r.loss <= threshold)
    }

    fn first_round(&self, pred: impl Fn(&RoundRecord) -> bool) -> Option<u32> {
        std::iter::once(&self.initial)
            .chain(&self.rounds)
            .find(|r| pred(r))
            .map(|r| r.round)
    }

    pub fn final_loss(&self) -> f64 {
        self.rounds.last().unwrap_or(&self.initial).loss
    }
}

/// Models held across the hierarchy. `servers[n - 1][i]` is the model of
/// node `i` at layer `n` (the last entry is the cloud).
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub global: Vec<f64>,
    pub servers: Vec<Vec<Vec<f64>>>,
    pub devices: Vec<Vec<f64>>,
    pub round: u32,
    tx_counts: Vec<Vec<u64>>,
    step_counts: Vec<u64>,
}

impl RunState {
    fn new(topology: &Topology, w0: &[f64]) -> Self {
        let servers = (1..=topology.num_layers())
            .map(|n| vec![w0.to_vec(); topology.layer_size(n)])
            .collect();
        Self {
            global: w0.to_vec(),
            servers,
            devices: vec![w0.to_vec(); topology.num_devices()],
            round: 0,
            tx_counts: (0..topology.num_layers())
                .map(|n| vec![0; topology.layer_size(n)])
                .collect(),
            step_counts: vec![0; topology.num_devices()],
        }
    }

    pub fn model(&self, node: NodeId) -> &[f64] {
        if node.layer == 0 {
            &self.devices[node.index]
        } else {
            &self.servers[node.layer - 1][node.index]
        }
    }

    /// True when every model in the subtree of `node` equals the node's.
    pub fn subtree_consistent(&self, topology: &Topology, node: NodeId) -> bool {
        let root = self.model(node);
        let mut frontier = vec![node];
        while let Some(cur) = frontier.pop() {
            if self.model(cur) != root {
                return false;
            }
            if cur.layer > 0 {
                frontier.extend(
                    topology
                        .children(cur)
                        .iter()
                        .map(|&k| NodeId::new(cur.layer - 1, k)),
                );
            }
        }
        true
    }

    fn broadcast(&mut self, topology: &Topology, node: NodeId, w: &[f64]) {
        let mut frontier = vec![node];
        while let Some(cur) = frontier.pop() {
            let slot = if cur.layer == 0 {
                &mut self.devices[cur.index]
            } else {
                &mut self.servers[cur.layer - 1][cur.index]
            };
            slot.copy_from_slice(w);
            if cur.layer > 0 {
                frontier.extend(
                    topology
                        .children(cur)
                        .iter()
                        .map(|&k| NodeId::new(cur.layer - 1, k)),
                );
            }
        }
    }
}

/// Hooks into the training loop.
pub trait Observer {
    /// Called right after `node` pushed its model into its subtree.
    fn on_broadcast(&mut self, _topology: &Topology, _node: NodeId, _state: &RunState) {}
    /// Called after the global model for `state.round` is set.
    fn on_round(&mut self, _state: &RunState) {}
}

struct NoObserver;
impl Observer for NoObserver {}

/// A child's exact model: `anchor + numerator / mass`.
struct ExactModel {
    anchor: Vec<f64>,
    numerator: Option<ExactVec>,
    mass: f64,
}

impl ExactModel {
    /// Adds `mass * (self - base)` to `acc`, exactly.
    fn add_delta_into(&self, base: &[f64], acc: &mut ExactVec) {
        if self.anchor != base {
            acc.add_scaled_difference(self.mass, &self.anchor, base);
        }
        if let Some(num) = &self.numerator {
            acc.add_exact(num);
        }
    }

    /// `self - base`, correctly rounded.
    fn delta(&self, base: &[f64]) -> Vec<f64> {
        let mut acc = ExactVec::zeros(base.len());
        self.add_delta_into(base, &mut acc);
        acc.div_round(self.mass)
    }
}

struct Ctx<'a, O: Observer> {
    task: &'a Task,
    topology: &'a Topology,
    schedule: &'a Schedule,
    quantizers: &'a [QuantizerSpec],
    opts: &'a RunOptions,
    masses: Vec<Vec<f64>>,
    observer: &'a mut O,
}

fn validate(
    task: &Task,
    topology: &Topology,
    schedule: &Schedule,
    quantizers: &[QuantizerSpec],
    opts: &RunOptions,
) -> Result<(), EngineError> {
    task.check_topology(topology)?;
    schedule.validate()?;
    let n = topology.num_layers();
    if schedule.taus.len() != n {
        return Err(EngineError::ScheduleLength {
            layers: n,
            found: schedule.taus.len(),
        });
    }
    if quantizers.len() != n {
        return Err(EngineError::QuantizerCountMismatch {
            layers: n,
            found: quantizers.len(),
        });
    }
    for q in quantizers {
        q.validate()?;
    }
    check_common(task, opts)
}

fn check_common(task: &Task, opts: &RunOptions) -> Result<(), EngineError> {
    if !(opts.mu > 0.0) || !opts.mu.is_finite() {
        return Err(EngineError::InvalidLearningRate(opts.mu));
    }
    if let Some(w0) = &opts.initial {
        if w0.len() != task.dim() {
            return Err(EngineError::DimensionMismatch {
                expected: task.dim(),
                found: w0.len(),
            });
        }
    }
    if opts.batch_size == 0 {
        return Err(TaskError::BatchTooLarge {
            device: 0,
            batch: 0,
            available: 0,
        }
        .into());
    }
    Ok(())
}

/// `steps` SGD steps on device `device`, drawing batch streams keyed by the
/// device, the round and the device's step counter within the round.
fn local_sgd(
    task: &Task,
    opts: &RunOptions,
    device: usize,
    round: u32,
    first_step: u64,
    steps: u32,
    w: &mut [f64],
) -> Result<(), EngineError> {
    let batch = opts.batch_size.min(task.devices[device].len());
    for k in 0..steps as u64 {
        let mut r = rng::stream(
            opts.seed,
            Domain::Batch,
            &[device as u64, round as u64, first_step + k],
        );
        let g = task.stochastic_gradient(device, w, batch, &mut r)?;
        for (wi, gi) in w.iter_mut().zip(g.iter()) {
            *wi -= opts.mu * gi;
        }
    }
    Ok(())
}

fn initial_model(task: &Task, opts: &RunOptions) -> Vec<f64> {
    match &opts.initial {
        Some(w) => w.0.clone(),
        None => task.init_params(opts.seed).0,
    }
}

fn record(
    task: &Task,
    w: &[f64],
    weighted: bool,
    round: u32,
    latency: f64,
) -> Result<RoundRecord, EngineError> {
    Ok(RoundRecord {
        round,
        loss: task.global_loss_flat(w, weighted)?,
        grad_norm_sq: task.global_gradient(w, weighted)?.norm_sq(),
        latency: if round == 0 { 0.0 } else { latency },
        cumulative_time: round as f64 * latency,
    })
}

impl<O: Observer> Ctx<'_, O> {
    /// Runs the subtree of `node`, starting from the model it currently
    /// holds, and returns its exact final model.
    fn run_node(&mut self, state: &mut RunState, node: NodeId) -> Result<ExactModel, EngineError> {
        let round = state.round;
        if node.layer == 0 {
            let i = node.index;
            let mut w = std::mem::take(&mut state.devices[i]);
            let first = state.step_counts[i];
            let res = local_sgd(
                self.task,
                self.opts,
                i,
                round,
                first,
                self.schedule.taus[0],
                &mut w,
            );
            state.step_counts[i] += self.schedule.taus[0] as u64;
            state.devices[i] = w.clone();
            res?;
            return Ok(ExactModel {
                anchor: w,
                numerator: None,
                mass: self.masses[0][i],
            });
        }
        let n_layers = self.topology.num_layers();
        let iterations = if node.layer == n_layers {
            1
        } else {
            self.schedule.taus[node.layer]
        };
        let quantizer = &self.quantizers[node.layer - 1];
        let mass = self.masses[node.layer][node.index];
        let children: Vec<usize> = self.topology.children(node).to_vec();
        let mut anchor = state.model(node).to_vec();
        let mut numerator = ExactVec::zeros(anchor.len());
        for k in 0..iterations {
            if k > 0 {
                anchor = numerator.offset_div_round(&anchor, mass);
                numerator = ExactVec::zeros(anchor.len());
            }
            state.broadcast(self.topology, node, &anchor);
            self.observer.on_broadcast(self.topology, node, state);
            for &c in &children {
                let child = NodeId::new(node.layer - 1, c);
                let out = self.run_node(state, child)?;
                if quantizer.is_identity() {
                    out.add_delta_into(&anchor, &mut numerator);
                } else {
                    let tx = state.tx_counts[child.layer][c];
                    state.tx_counts[child.layer][c] += 1;
                    let mut r = rng::stream(
                        self.opts.seed,
                        Domain::Quantize,
                        &[round as u64, child.layer as u64, c as u64, tx],
                    );
                    let q = quantizer.quantize(&out.delta(&anchor), &mut r)?;
                    numerator.add_scaled(out.mass, &q);
                }
            }
        }
        let model = numerator.offset_div_round(&anchor, mass);
        state.servers[node.layer - 1][node.index] = model;
        Ok(ExactModel {
            anchor,
            numerator: Some(numerator),
            mass,
        })
    }
}

/// Aggregation masses per layer: devices weigh 1 (or their dataset size);
/// every server weighs the sum of its children.
pub fn layer_masses(task: &Task, topology: &Topology, weighted: bool) -> Vec<Vec<f64>> {
    let mut out = vec![task.device_masses(weighted)];
    for layer in 1..=topology.num_layers() {
        let below = &out[layer - 1];
        let row = (0..topology.layer_size(layer))
            .map(|i| {
                topology
                    .children(NodeId::new(layer, i))
                    .iter()
                    .map(|&k| below[k])
                    .sum()
            })
            .collect();
        out.push(row);
    }
    out
}

pub fn run(
    task: &Task,
    topology: &Topology,
    schedule: &Schedule,
    quantizers: &[QuantizerSpec],
    opts: &RunOptions,
) -> Result<RunMetrics, EngineError> {
    run_with_observer(task, topology, schedule, quantizers, opts, &mut NoObserver)
}

pub fn run_with_observer<O: Observer>(
    task: &Task,
    topology: &Topology,
    schedule: &Schedule,
    quantizers: &[QuantizerSpec],
    opts: &RunOptions,
    observer: &mut O,
) -> Result<RunMetrics, EngineError> {
    validate(task, topology, schedule, quantizers, opts)?;
    let w0 = initial_model(task, opts);
    let mut state = RunState::new(topology, &w0);
    let mut ctx = Ctx {
        task,
        topology,
        schedule,
        quantizers,
        opts,
        masses: layer_masses(task, topology, opts.weighted),
        observer,
    };
    let initial = record(task, &w0, opts.weighted, 0, opts.round_latency)?;
    let cloud = NodeId::new(topology.num_layers(), 0);
    let mut rounds = Vec::with_capacity(schedule.rounds as usize);
    for t in 0..schedule.rounds {
        state.round = t;
        state.tx_counts.iter_mut().for_each(|v| v.fill(0));
        state.step_counts.fill(0);
        ctx.run_node(&mut state, cloud)?;
        state.global = state.model(cloud).to_vec();
        state.round = t + 1;
        ctx.observer.on_round(&state);
        rounds.push(record(
            task,
            &state.global,
            opts.weighted,
            t + 1,
            opts.round_latency,
        )?);
    }
    Ok(RunMetrics {
        initial,
        rounds,
        final_accuracy: task.accuracy(&state.global),
        final_model: ParamVector(state.global),
    })
}

/// Flat federated averaging: every device runs `local_steps` SGD steps from
/// the global model, then the server takes the (mass-weighted) mean.
pub fn run_fedavg_reference(
    task: &Task,
    local_steps: u32,
    rounds: u32,
    opts: &RunOptions,
) -> Result<RunMetrics, EngineError> {
    if local_steps == 0 || rounds == 0 {
        return Err(EngineError::InvalidSchedule);
    }
    check_common(task, opts)?;
    let masses = task.device_masses(opts.weighted);
    let total: f64 = masses.iter().sum();
    let mut w = initial_model(task, opts);
    let initial = record(task, &w, opts.weighted, 0, opts.round_latency)?;
    let mut records = Vec::with_capacity(rounds as usize);
    for t in 0..rounds {
        let mut acc = ExactVec::zeros(w.len());
        for (i, &m) in masses.iter().enumerate() {
            let mut wi = w.clone();
            local_sgd(task, opts, i, t, 0, local_steps, &mut wi)?;
            acc.add_scaled_difference(m, &wi, &w);
        }
        w = acc.offset_div_round(&w, total);
        records.push(record(task, &w, opts.weighted, t + 1, opts.round_latency)?);
    }
    Ok(RunMetrics {
        initial,
        rounds: records,
        final_accuracy: task.accuracy(&w),
        final_model: ParamVector(w),
    })
}
