//! Loss and gradient oracles, datasets and non-IID partitioning.

use std::ops::{Deref, DerefMut};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Domain};
use crate::topology::{NodeId, Topology};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("batch size {batch} exceeds the {available} samples held by device {device}")]
    BatchTooLarge {
        device: usize,
        batch: usize,
        available: usize,
    },
    #[error("device {device} has an empty dataset")]
    EmptyDataset { device: usize },
    #[error("no device {device}; the task has {devices}")]
    UnknownDevice { device: usize, devices: usize },
    #[error("labeled pool cannot serve the request: {0}")]
    InsufficientPool(String),
    #[error("sample has {found} features, model expects {expected}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("task has {task} devices but topology has {topology}")]
    DeviceCountMismatch { task: usize, topology: usize },
    #[error("invalid size range [{lo}, {hi}]")]
    BadSizeRange { lo: usize, hi: usize },
    #[error("could not read labeled pool: {0}")]
    Io(String),
}

fn normal<R: Rng + ?Sized>(r: &mut R) -> f64 {
    StandardNormal.sample(r)
}

/// Dense model parameters `w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalDataset {
    pub samples: Vec<Sample>,
}

impl LocalDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> std::collections::BTreeSet<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Model families with closed-form loss and gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// `l(x; w) = 0.5 * ||w - x||^2`; labels ignored.
    Quadratic { dim: usize },
    /// Multinomial logistic regression.
    Logistic { features: usize, classes: usize },
    /// One tanh hidden layer followed by softmax.
    TinyMlp {
        features: usize,
        hidden: usize,
        classes: usize,
    },
}

impl ModelKind {
    pub fn dim(&self) -> usize {
        match *self {
            ModelKind::Quadratic { dim } => dim,
            ModelKind::Logistic { features, classes } => classes * (features + 1),
            ModelKind::TinyMlp {
                features,
                hidden,
                classes,
            } => hidden * (features + 1) + classes * (hidden + 1),
        }
    }

    fn features(&self) -> usize {
        match *self {
            ModelKind::Quadratic { dim } => dim,
            ModelKind::Logistic { features, .. } | ModelKind::TinyMlp { features, .. } => features,
        }
    }

    /// Loss on one sample; accumulates its gradient into `grad` when given.
    fn sample_loss(&self, w: &[f64], s: &Sample, grad: Option<&mut [f64]>) -> f64 {
        match *self {
            ModelKind::Quadratic { .. } => {
                let mut loss = 0.0;
                match grad {
                    Some(g) => {
                        for ((gi, wi), xi) in g.iter_mut().zip(w).zip(&s.features) {
                            let d = wi - xi;
                            loss += d * d;
                            *gi += d;
                        }
                    }
                    None => {
                        for (wi, xi) in w.iter().zip(&s.features) {
                            loss += (wi - xi) * (wi - xi);
                        }
                    }
                }
                0.5 * loss
            }
            ModelKind::Logistic { features, classes } => {
                let stride = features + 1;
                let logits: Vec<f64> = (0..classes)
                    .map(|k| {
                        let row = &w[k * stride..(k + 1) * stride];
                        row[features]
                            + row[..features]
                                .iter()
                                .zip(&s.features)
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                    })
                    .collect();
                let (loss, probs) = softmax_xent(&logits, s.label);
                if let Some(g) = grad {
                    for k in 0..classes {
                        let err = probs[k] - if k == s.label { 1.0 } else { 0.0 };
                        let row = &mut g[k * stride..(k + 1) * stride];
                        for (gj, xj) in row[..features].iter_mut().zip(&s.features) {
                            *gj += err * xj;
                        }
                        row[features] += err;
                    }
                }
                loss
            }
            ModelKind::TinyMlp {
                features,
                hidden,
                classes,
            } => {
                let s1 = features + 1;
                let s2 = hidden + 1;
                let (w1, w2) = w.split_at(hidden * s1);
                let h: Vec<f64> = (0..hidden)
                    .map(|j| {
                        let row = &w1[j * s1..(j + 1) * s1];
                        (row[features]
                            + row[..features]
                                .iter()
                                .zip(&s.features)
                                .map(|(a, b)| a * b)
                                .sum::<f64>())
                        .tanh()
                    })
                    .collect();
                let logits: Vec<f64> = (0..classes)
                    .map(|k| {
                        let row = &w2[k * s2..(k + 1) * s2];
                        row[hidden]
                            + row[..hidden]
                                .iter()
                                .zip(&h)
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                    })
                    .collect();
                let (loss, probs) = softmax_xent(&logits, s.label);
                if let Some(g) = grad {
                    let (g1, g2) = g.split_at_mut(hidden * s1);
                    let mut dh = vec![0.0; hidden];
                    for k in 0..classes {
                        let err = probs[k] - if k == s.label { 1.0 } else { 0.0 };
                        let row = &w2[k * s2..(k + 1) * s2];
                        let grow = &mut g2[k * s2..(k + 1) * s2];
                        for j in 0..hidden {
                            grow[j] += err * h[j];
                            dh[j] += err * row[j];
                        }
                        grow[hidden] += err;
                    }
                    for j in 0..hidden {
                        let dz = dh[j] * (1.0 - h[j] * h[j]);
                        let grow = &mut g1[j * s1..(j + 1) * s1];
                        for (gi, xi) in grow[..features].iter_mut().zip(&s.features) {
                            *gi += dz * xi;
                        }
                        grow[features] += dz;
                    }
                }
                loss
            }
        }
    }

    fn predict(&self, w: &[f64], x: &[f64]) -> usize {
        let probe = Sample {
            features: x.to_vec(),
            label: 0,
        };
        match *self {
            ModelKind::Quadratic { .. } => 0,
            ModelKind::Logistic { features, classes } => {
                let stride = features + 1;
                argmax((0..classes).map(|k| {
                    let row = &w[k * stride..(k + 1) * stride];
                    row[features]
                        + row[..features]
                            .iter()
                            .zip(x)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                }))
            }
            ModelKind::TinyMlp { classes, .. } => {
                // cross-entropy is smallest for the most probable class
                argmax((0..classes).map(|k| {
                    let s = Sample {
                        label: k,
                        ..probe.clone()
                    };
                    -self.sample_loss(w, &s, None)
                }))
            }
        }
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + m - logits[label];
    (loss, exps.into_iter().map(|e| e / z).collect())
}

/// A learning task: a model family plus one dataset per device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub model: ModelKind,
    pub devices: Vec<LocalDataset>,
    /// Held-out split for accuracy (classification tasks).
    #[serde(default)]
    pub test: Vec<Sample>,
}

impl Task {
    pub fn new(model: ModelKind, devices: Vec<LocalDataset>) -> Result<Self, TaskError> {
        for (device, d) in devices.iter().enumerate() {
            if d.is_empty() {
                return Err(TaskError::EmptyDataset { device });
            }
            for s in &d.samples {
                if s.features.len() != model.features() {
                    return Err(TaskError::FeatureMismatch {
                        expected: model.features(),
                        found: s.features.len(),
                    });
                }
            }
        }
        Ok(Self {
            model,
            devices,
            test: Vec::new(),
        })
    }

    /// Quadratic task where device `i` holds the single point `targets[i]`,
    /// so `F_i(w) = 0.5 * ||w - targets[i]||^2`.
    pub fn quadratic_from_targets(targets: &[Vec<f64>]) -> Result<Self, TaskError> {
        let dim = targets.first().map_or(0, Vec::len);
        let devices = targets
            .iter()
            .map(|t| LocalDataset {
                samples: vec![Sample {
                    features: t.clone(),
                    label: 0,
                }],
            })
            .collect();
        Self::new(ModelKind::Quadratic { dim }, devices)
    }

    /// Heterogeneous quadratic task: device centers drawn from
    /// `N(0, center_scale^2 I)`, samples scattered around them with `spread`.
    pub fn quadratic_synthetic(
        devices: usize,
        dim: usize,
        size_range: (usize, usize),
        center_scale: f64,
        spread: f64,
        seed: u64,
    ) -> Result<Self, TaskError> {
        let (lo, hi) = size_range;
        if lo == 0 || lo > hi {
            return Err(TaskError::BadSizeRange { lo, hi });
        }
        let data = (0..devices)
            .map(|i| {
                let mut r = rng::stream(seed, Domain::Data, &[i as u64]);
                let center: Vec<f64> = (0..dim).map(|_| center_scale * normal(&mut r)).collect();
                let n = r.random_range(lo..=hi);
                let samples = (0..n)
                    .map(|_| Sample {
                        features: center.iter().map(|c| c + spread * normal(&mut r)).collect(),
                        label: 0,
                    })
                    .collect();
                LocalDataset { samples }
            })
            .collect();
        Self::new(ModelKind::Quadratic { dim }, data)
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn dataset_sizes(&self) -> Vec<usize> {
        self.devices.iter().map(LocalDataset::len).collect()
    }

    fn device(&self, device: usize) -> Result<&LocalDataset, TaskError> {
        self.devices.get(device).ok_or(TaskError::UnknownDevice {
            device,
            devices: self.devices.len(),
        })
    }

    /// Starting model: zeros for convex tasks, small random weights for the MLP.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        match self.model {
            ModelKind::TinyMlp {
                features, hidden, ..
            } => {
                let mut r = rng::stream(seed, Domain::Init, &[]);
                let scale = 1.0 / ((features.max(hidden)) as f64).sqrt();
                ParamVector((0..self.dim()).map(|_| scale * normal(&mut r)).collect())
            }
            _ => ParamVector::zeros(self.dim()),
        }
    }

    /// `F_i(w)`: mean loss over the device's full dataset.
    pub fn local_loss(&self, device: usize, w: &[f64]) -> Result<f64, TaskError> {
        let d = self.device(device)?;
        let total: f64 = d
            .samples
            .iter()
            .map(|s| self.model.sample_loss(w, s, None))
            .sum();
        Ok(total / d.len() as f64)
    }

    /// `grad F_i(w)` over the full local dataset.
    pub fn full_gradient(&self, device: usize, w: &[f64]) -> Result<ParamVector, TaskError> {
        let d = self.device(device)?;
        let idx: Vec<usize> = (0..d.len()).collect();
        Ok(self.batch_gradient(d, w, &idx))
    }

    fn batch_gradient(&self, d: &LocalDataset, w: &[f64], idx: &[usize]) -> ParamVector {
        let mut g = vec![0.0; w.len()];
        for &i in idx {
            self.model.sample_loss(w, &d.samples[i], Some(&mut g));
        }
        let inv = idx.len() as f64;
        for v in g.iter_mut() {
            *v /= inv;
        }
        ParamVector(g)
    }

    /// Mini-batch gradient: `batch` samples drawn uniformly without
    /// replacement. A batch covering the whole dataset is the exact gradient
    /// and consumes no randomness.
    pub fn stochastic_gradient<R: Rng + ?Sized>(
        &self,
        device: usize,
        w: &[f64],
        batch: usize,
        rng: &mut R,
    ) -> Result<ParamVector, TaskError> {
        let d = self.device(device)?;
        if batch > d.len() || batch == 0 {
            return Err(TaskError::BatchTooLarge {
                device,
                batch,
                available: d.len(),
            });
        }
        if batch == d.len() {
            return self.full_gradient(device, w);
        }
        let idx = rand::seq::index::sample(rng, d.len(), batch).into_vec();
        Ok(self.batch_gradient(d, w, &idx))
    }

    /// Per-device aggregation weights at the device level: 1 each, or the
    /// dataset size in weighted mode.
    pub fn device_masses(&self, weighted: bool) -> Vec<f64> {
        self.devices
            .iter()
            .map(|d| if weighted { d.len() as f64 } else { 1.0 })
            .collect()
    }

    /// Flat global loss: plain device mean, or dataset-size weighted mean.
    pub fn global_loss_flat(&self, w: &[f64], weighted: bool) -> Result<f64, TaskError> {
        let masses = self.device_masses(weighted);
        let total: f64 = masses.iter().sum();
        let mut acc = 0.0;
        for (i, m) in masses.iter().enumerate() {
            acc += m * self.local_loss(i, w)?;
        }
        Ok(acc / total)
    }

    /// Global loss evaluated bottom-up through the hierarchy.
    pub fn global_loss(
        &self,
        topology: &Topology,
        w: &[f64],
        weighted: bool,
    ) -> Result<f64, TaskError> {
        self.check_topology(topology)?;
        let masses = self.device_masses(weighted);
        let mut values: Vec<f64> = (0..self.num_devices())
            .map(|i| self.local_loss(i, w))
            .collect::<Result<_, _>>()?;
        let mut below_mass = masses;
        for layer in 1..=topology.num_layers() {
            let mut next_vals = Vec::with_capacity(topology.layer_size(layer));
            let mut next_mass = Vec::with_capacity(topology.layer_size(layer));
            for idx in 0..topology.layer_size(layer) {
                let kids = topology.children(NodeId::new(layer, idx));
                let m: f64 = kids.iter().map(|&k| below_mass[k]).sum();
                let v: f64 = kids.iter().map(|&k| below_mass[k] / m * values[k]).sum();
                next_vals.push(v);
                next_mass.push(m);
            }
            values = next_vals;
            below_mass = next_mass;
        }
        Ok(values[0])
    }

    /// Exact gradient of the flat global loss.
    pub fn global_gradient(&self, w: &[f64], weighted: bool) -> Result<ParamVector, TaskError> {
        let masses = self.device_masses(weighted);
        let total: f64 = masses.iter().sum();
        let mut g = vec![0.0; w.len()];
        for (i, m) in masses.iter().enumerate() {
            let gi = self.full_gradient(i, w)?;
            for (a, b) in g.iter_mut().zip(gi.iter()) {
                *a += m * b;
            }
        }
        for v in g.iter_mut() {
            *v /= total;
        }
        Ok(ParamVector(g))
    }

    pub fn check_topology(&self, topology: &Topology) -> Result<(), TaskError> {
        if topology.num_devices() != self.num_devices() {
            return Err(TaskError::DeviceCountMismatch {
                task: self.num_devices(),
                topology: topology.num_devices(),
            });
        }
        Ok(())
    }

    /// Top-1 accuracy on the held-out split; `None` without one.
    pub fn accuracy(&self, w: &[f64]) -> Option<f64> {
        if self.test.is_empty() || matches!(self.model, ModelKind::Quadratic { .. }) {
            return None;
        }
        let hits = self
            .test
            .iter()
            .filter(|s| self.model.predict(w, &s.features) == s.label)
            .count();
        Some(hits as f64 / self.test.len() as f64)
    }

    /// Mean of each device's samples (quadratic tasks).
    pub fn device_means(&self) -> Vec<Vec<f64>> {
        self.devices
            .iter()
            .map(|d| {
                let mut m = vec![0.0; self.model.features()];
                for s in &d.samples {
                    for (a, b) in m.iter_mut().zip(&s.features) {
                        *a += b;
                    }
                }
                m.iter().map(|v| v / d.len() as f64).collect()
            })
            .collect()
    }

    /// Closed-form minimizer of the quadratic global loss.
    pub fn quadratic_optimum(&self, weighted: bool) -> Option<ParamVector> {
        if !matches!(self.model, ModelKind::Quadratic { .. }) {
            return None;
        }
        let masses = self.device_masses(weighted);
        let total: f64 = masses.iter().sum();
        let mut w = vec![0.0; self.dim()];
        for (mean, m) in self.device_means().iter().zip(&masses) {
            for (a, b) in w.iter_mut().zip(mean) {
                *a += m * b;
            }
        }
        Some(ParamVector(w.into_iter().map(|v| v / total).collect()))
    }

    /// Exact mini-batch gradient noise for the quadratic task: the largest
    /// over devices of `E||g_batch - grad F_i||^2`, which does not depend on
    /// `w`. Sampling without replacement gives the finite-population factor.
    pub fn quadratic_gradient_variance(&self, batch: usize) -> Option<f64> {
        if !matches!(self.model, ModelKind::Quadratic { .. }) {
            return None;
        }
        let means = self.device_means();
        let worst = self
            .devices
            .iter()
            .zip(&means)
            .map(|(d, mean)| {
                let n = d.len();
                if batch >= n {
                    return 0.0;
                }
                let spread: f64 = d
                    .samples
                    .iter()
                    .map(|s| {
                        s.features
                            .iter()
                            .zip(mean)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / n as f64;
                spread / batch as f64 * (n - batch) as f64 / (n - 1) as f64
            })
            .fold(0.0, f64::max);
        Some(worst)
    }

    /// Monte-Carlo estimate of the largest per-device mini-batch gradient
    /// variance at `w`.
    pub fn estimate_gradient_variance(
        &self,
        w: &[f64],
        batch: usize,
        draws: usize,
        seed: u64,
    ) -> Result<f64, TaskError> {
        let mut worst = 0.0f64;
        for i in 0..self.num_devices() {
            let full = self.full_gradient(i, w)?;
            let mut r = rng::stream(seed, Domain::Measure, &[u64::MAX, i as u64]);
            let mut acc = 0.0;
            for _ in 0..draws {
                let g = self.stochastic_gradient(i, w, batch.min(self.devices[i].len()), &mut r)?;
                acc += g
                    .iter()
                    .zip(full.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            worst = worst.max(acc / draws as f64);
        }
        Ok(worst)
    }
}

/// A labeled sample pool to partition across devices.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPool {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl LabeledPool {
    pub fn features(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    /// Gaussian class blobs with means drawn at `separation` scale.
    pub fn synthetic_blobs(
        classes: usize,
        features: usize,
        per_class: usize,
        separation: f64,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(seed, Domain::Data, &[u64::MAX]);
        let centers: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..features).map(|_| separation * normal(&mut r)).collect())
            .collect();
        let mut samples = Vec::with_capacity(classes * per_class);
        for (label, c) in centers.iter().enumerate() {
            for _ in 0..per_class {
                samples.push(Sample {
                    features: c.iter().map(|v| v + normal(&mut r)).collect(),
                    label,
                });
            }
        }
        Self {
            samples,
            num_classes: classes,
        }
    }

    /// Reads rows of `f_1, ..., f_d, label`. A first row that does not parse
    /// is treated as a header.
    pub fn from_csv(path: &Path) -> Result<Self, TaskError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| TaskError::Io(e.to_string()))?;
        let mut samples = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| TaskError::Io(e.to_string()))?;
            let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            let values = match parsed {
                Ok(v) => v,
                Err(_) if row == 0 => continue,
                Err(e) => return Err(TaskError::Io(format!("row {}: {e}", row + 1))),
            };
            let (label, feats) = values
                .split_last()
                .ok_or_else(|| TaskError::Io(format!("row {} is empty", row + 1)))?;
            if *label < 0.0 || label.fract() != 0.0 {
                return Err(TaskError::Io(format!(
                    "row {}: label {label} is not a class index",
                    row + 1
                )));
            }
            samples.push(Sample {
                features: feats.to_vec(),
                label: *label as usize,
            });
        }
        let num_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
        Ok(Self {
            samples,
            num_classes,
        })
    }

    /// Splits off a held-out fraction, chosen by seed.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (LabeledPool, Vec<Sample>) {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.shuffle(&mut rng::stream(seed, Domain::Split, &[]));
        let n_test = (self.samples.len() as f64 * test_fraction).round() as usize;
        let test = idx[..n_test]
            .iter()
            .map(|&i| self.samples[i].clone())
            .collect();
        let train = idx[n_test..]
            .iter()
            .map(|&i| self.samples[i].clone())
            .collect();
        (
            LabeledPool {
                samples: train,
                num_classes: self.num_classes,
            },
            test,
        )
    }
}

/// Heterogeneity cases: each device sees 2 classes, 6 classes, or all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionCase {
    #[serde(rename = "1")]
    TwoClasses,
    #[serde(rename = "2")]
    SixClasses,
    #[serde(rename = "3")]
    AllClasses,
}

impl PartitionCase {
    pub fn from_index(case: u8) -> Option<Self> {
        match case {
            1 => Some(Self::TwoClasses),
            2 => Some(Self::SixClasses),
            3 => Some(Self::AllClasses),
            _ => None,
        }
    }

    pub fn classes_per_device(&self, num_classes: usize) -> usize {
        match self {
            Self::TwoClasses => 2,
            Self::SixClasses => 6,
            Self::AllClasses => num_classes,
        }
    }
}

/// Gives each device of `topology` a sample count uniform in `size_range`
/// drawn from a device-specific random class subset. Every chosen class is
/// represented at least once; devices may share pool samples.
pub fn partition(
    pool: &LabeledPool,
    topology: &Topology,
    case: PartitionCase,
    size_range: (usize, usize),
    seed: u64,
) -> Result<Vec<LocalDataset>, TaskError> {
    let (lo, hi) = size_range;
    if lo == 0 || lo > hi {
        return Err(TaskError::BadSizeRange { lo, hi });
    }
    let k = case.classes_per_device(pool.num_classes);
    if k > pool.num_classes || k == 0 {
        return Err(TaskError::InsufficientPool(format!(
            "need {k} classes per device, pool has {}",
            pool.num_classes
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pool.num_classes];
    for (i, s) in pool.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let min_class = by_class.iter().map(Vec::len).min().unwrap_or(0);
    if min_class * k < hi || min_class == 0 {
        return Err(TaskError::InsufficientPool(format!(
            "smallest class holds {min_class} samples; {k} classes cannot supply {hi}"
        )));
    }
    (0..topology.num_devices())
        .map(|device| {
            let mut r = rng::stream(seed, Domain::Partition, &[device as u64]);
            let mut classes = rand::seq::index::sample(&mut r, pool.num_classes, k).into_vec();
            classes.sort_unstable();
            let size = r.random_range(lo..=hi);
            let mut candidates: Vec<usize> = classes
                .iter()
                .flat_map(|&c| by_class[c].iter().copied())
                .collect();
            // one guaranteed sample per chosen class, the rest uniformly
            let mut chosen = Vec::with_capacity(size);
            for &c in &classes {
                let pick = by_class[c][r.random_range(0..by_class[c].len())];
                chosen.push(pick);
            }
            candidates.retain(|i| !chosen.contains(i));
            candidates.shuffle(&mut r);
            chosen.extend(candidates.into_iter().take(size.saturating_sub(k)));
            chosen.truncate(size);
            Ok(LocalDataset {
                samples: chosen
                    .into_iter()
                    .map(|i| pool.samples[i].clone())
                    .collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_local_loss() {
        let t = Task::quadratic_from_targets(&[vec![2.0], vec![-1.0]]).unwrap();
        assert_eq!(t.local_loss(0, &[2.0]).unwrap(), 0.0);
        assert_eq!(t.local_loss(0, &[0.0]).unwrap(), 2.0);
    }

    #[test]
    fn logistic_at_zero_is_ln2() {
        let samples = vec![
            Sample {
                features: vec![1.0, 2.0],
                label: 0,
            },
            Sample {
                features: vec![-1.0, 0.5],
                label: 1,
            },
            Sample {
                features: vec![3.0, -2.0],
                label: 1,
            },
            Sample {
                features: vec![0.0, 0.0],
                label: 0,
            },
        ];
        let t = Task::new(
            ModelKind::Logistic {
                features: 2,
                classes: 2,
            },
            vec![LocalDataset { samples }],
        )
        .unwrap();
        let w = vec![0.0; t.dim()];
        assert!((t.local_loss(0, &w).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn full_batch_is_exact_gradient() {
        let t = Task::quadratic_synthetic(2, 3, (5, 5), 1.0, 0.5, 4).unwrap();
        let w = [0.1, 0.2, 0.3];
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let g = t.stochastic_gradient(1, &w, 5, &mut r).unwrap();
        let mean = &t.device_means()[1];
        for ((gi, wi), mi) in g.iter().zip(&w).zip(mean) {
            assert!((gi - (wi - mi)).abs() < 1e-12);
        }
        assert!(matches!(
            t.stochastic_gradient(1, &w, 6, &mut r),
            Err(TaskError::BatchTooLarge { .. })
        ));
    }

    #[test]
    fn seeded_gradient_replays() {
        let t = Task::quadratic_synthetic(1, 4, (30, 30), 1.0, 1.0, 4).unwrap();
        let w = [0.0; 4];
        let a = t
            .stochastic_gradient(0, &w, 5, &mut ChaCha8Rng::seed_from_u64(8))
            .unwrap();
        let b = t
            .stochastic_gradient(0, &w, 5, &mut ChaCha8Rng::seed_from_u64(8))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn global_loss_examples() {
        let t = Task::quadratic_from_targets(&[vec![0.0], vec![2.0 * 2f64.sqrt()]]).unwrap();
        let topo = Topology::uniform(&[2]).unwrap();
        // F_1 = 0, F_2 = 0.5 * 8 = 4
        assert!((t.global_loss(&topo, &[0.0], false).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_global_loss() {
        // D = (1, 3), F = (0, 4)
        let d1 = LocalDataset {
            samples: vec![Sample {
                features: vec![0.0],
                label: 0,
            }],
        };
        let target = 2.0 * 2f64.sqrt();
        let d2 = LocalDataset {
            samples: vec![
                Sample {
                    features: vec![target],
                    label: 0
                };
                3
            ],
        };
        let t = Task::new(ModelKind::Quadratic { dim: 1 }, vec![d1, d2]).unwrap();
        let topo = Topology::uniform(&[2]).unwrap();
        assert!((t.global_loss(&topo, &[0.0], true).unwrap() - 3.0).abs() < 1e-12);
        assert!((t.global_loss_flat(&[0.0], true).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_optimum_zeroes_gradient() {
        let t = Task::quadratic_synthetic(5, 3, (4, 9), 2.0, 1.0, 11).unwrap();
        for weighted in [false, true] {
            let w = t.quadratic_optimum(weighted).unwrap();
            let g = t.global_gradient(&w, weighted).unwrap();
            assert!(g.norm_sq() < 1e-26, "{}", g.norm_sq());
        }
    }

    #[test]
    fn partition_cases_control_label_support() {
        let pool = LabeledPool::synthetic_blobs(10, 3, 400, 2.0, 1);
        let topo = Topology::uniform(&[4, 3]).unwrap();
        let c1 = partition(&pool, &topo, PartitionCase::TwoClasses, (50, 120), 2).unwrap();
        assert!(c1.iter().all(|d| d.labels().len() == 2));
        let c2 = partition(&pool, &topo, PartitionCase::SixClasses, (50, 120), 2).unwrap();
        assert!(c2.iter().all(|d| d.labels().len() == 6));
        let c3 = partition(&pool, &topo, PartitionCase::AllClasses, (50, 120), 2).unwrap();
        assert!(c3.iter().all(|d| d.labels().len() == 10));
        assert!(c1
            .iter()
            .chain(&c2)
            .chain(&c3)
            .all(|d| (50..=120).contains(&d.len())));
    }

    #[test]
    fn partition_rejects_small_pool() {
        let pool = LabeledPool::synthetic_blobs(10, 3, 20, 2.0, 1);
        let topo = Topology::uniform(&[2]).unwrap();
        assert!(matches!(
            partition(&pool, &topo, PartitionCase::TwoClasses, (50, 60), 2),
            Err(TaskError::InsufficientPool(_))
        ));
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let pool = LabeledPool::synthetic_blobs(3, 4, 10, 2.0, 5);
        let model = ModelKind::TinyMlp {
            features: 4,
            hidden: 5,
            classes: 3,
        };
        let t = Task::new(
            model,
            vec![LocalDataset {
                samples: pool.samples.clone(),
            }],
        )
        .unwrap();
        let w = t.init_params(3);
        let g = t.full_gradient(0, &w).unwrap();
        let h = 1e-6;
        for i in (0..t.dim()).step_by(7) {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (t.local_loss(0, &wp).unwrap() - t.local_loss(0, &wm).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let pool = LabeledPool::synthetic_blobs(4, 3, 6, 2.0, 5);
        let model = ModelKind::Logistic {
            features: 3,
            classes: 4,
        };
        let t = Task::new(
            model,
            vec![LocalDataset {
                samples: pool.samples.clone(),
            }],
        )
        .unwrap();
        let w: Vec<f64> = (0..t.dim())
            .map(|i| (i as f64 * 0.37).sin() * 0.3)
            .collect();
        let g = t.full_gradient(0, &w).unwrap();
        let h = 1e-6;
        for i in 0..t.dim() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (t.local_loss(0, &wp).unwrap() - t.local_loss(0, &wm).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn csv_pool_loads_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.csv");
        std::fs::write(&path, "a,b,label\n0.5,1.0,0\n-1,2,2\n").unwrap();
        let pool = LabeledPool::from_csv(&path).unwrap();
        assert_eq!(pool.samples.len(), 2);
        assert_eq!(pool.num_classes, 3);
        assert_eq!(pool.samples[1].features, vec![-1.0, 2.0]);
    }
}
