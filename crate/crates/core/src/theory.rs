//! Convergence condition and rate bound for nested quantized aggregation.
//!
//! All functions take the intra-layer counts as reals so the optimizer can
//! evaluate them on continuous relaxations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{NodeId, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("recursion layer {layer} outside 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("the recursion needs at least two aggregation layers")]
    NeedsTwoLayers,
    #[error("{0}")]
    WrongSpecialization(&'static str),
    #[error("expected {expected} entries for {what}, got {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("no positive learning rate satisfies the condition")]
    NoFeasibleMu,
}

/// Constants of the analysis together with the schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Lipschitz constant of the gradient.
    pub lipschitz: f64,
    /// Bound on the stochastic gradient variance.
    pub sigma2: f64,
    /// Learning rate.
    pub mu: f64,
    /// `F(w_0) - F(w*)`.
    pub gap0: f64,
    /// Quantizer variance constants `q_1..q_N`.
    pub q: Vec<f64>,
    /// Intra-layer counts `tau_1..tau_N`.
    pub taus: Vec<f64>,
}

impl TheoryParams {
    pub fn validate(&self, topology: &Topology) -> Result<(), TheoryError> {
        let n = topology.num_layers();
        if self.taus.len() != n {
            return Err(TheoryError::LengthMismatch {
                what: "taus",
                expected: n,
                found: self.taus.len(),
            });
        }
        if self.q.len() != n {
            return Err(TheoryError::LengthMismatch {
                what: "q",
                expected: n,
                found: self.q.len(),
            });
        }
        let scalars = [("L", self.lipschitz), ("mu", self.mu)];
        for (name, value) in scalars {
            if !(value > 0.0) {
                return Err(TheoryError::InvalidParameter { name, value });
            }
        }
        if !(self.sigma2 >= 0.0) {
            return Err(TheoryError::InvalidParameter {
                name: "sigma2",
                value: self.sigma2,
            });
        }
        if !(self.gap0 >= 0.0) {
            return Err(TheoryError::InvalidParameter {
                name: "gap0",
                value: self.gap0,
            });
        }
        if let Some(&v) = self.q.iter().find(|v| !(**v >= 0.0)) {
            return Err(TheoryError::InvalidParameter {
                name: "q",
                value: v,
            });
        }
        if let Some(&v) = self.taus.iter().find(|v| !(**v >= 1.0)) {
            return Err(TheoryError::InvalidParameter {
                name: "tau",
                value: v,
            });
        }
        Ok(())
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { mu, ..self.clone() }
    }
}

/// Speed and error parts of the rate bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateBound {
    pub speed_term: f64,
    pub error_term: f64,
    pub total: f64,
}

/// Sums after sorting by magnitude, smallest first.
fn sum_small_first(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    terms.into_iter().sum()
}

fn prefix_product(v: &[f64], upto: usize) -> f64 {
    v[..upto].iter().product()
}

/// Recursion values for every node of layers `1..=N-1`: `out[n-1][i]` is
/// the value at node `i` of layer `n`. Children's values enter through the
/// largest `count * value` among the node's children.
pub fn recursion_a_nodes(
    params: &TheoryParams,
    topology: &Topology,
) -> Result<Vec<Vec<f64>>, TheoryError> {
    let n_layers = topology.num_layers();
    if n_layers < 2 {
        return Err(TheoryError::NeedsTwoLayers);
    }
    let (q, tau) = (&params.q, &params.taus);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n_layers - 1);
    // layer 1
    let first: Vec<f64> = topology
        .subtree_counts(1)
        .iter()
        .map(|&c| {
            let c = c as f64;
            c * (q[1] * tau[0] * tau[1] + (1.0 / c) * q[0] * (1.0 + q[1]) * tau[0])
        })
        .collect();
    out.push(first);
    for layer in 2..n_layers {
        let below = &out[layer - 2];
        let below_counts = topology.subtree_counts(layer - 1);
        let reps = prefix_product(tau, layer + 1);
        let row = (0..topology.layer_size(layer))
            .map(|i| {
                let node = NodeId::new(layer, i);
                let c = topology.subtree_devices(node) as f64;
                let worst_child = topology
                    .children(node)
                    .iter()
                    .map(|&k| below_counts[k] as f64 * below[k])
                    .fold(0.0, f64::max);
                c * (q[layer] * reps + (1.0 / c) * (1.0 + q[layer]) * worst_child)
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

/// Layer-wide maximum of the recursion at `layer` (1-based, `1..=N-1`).
pub fn recursion_a(
    params: &TheoryParams,
    topology: &Topology,
    layer: usize,
) -> Result<f64, TheoryError> {
    let n_layers = topology.num_layers();
    if n_layers < 2 {
        return Err(TheoryError::NeedsTwoLayers);
    }
    if layer == 0 || layer > n_layers - 1 {
        return Err(TheoryError::LayerOutOfRange {
            layer,
            max: n_layers - 1,
        });
    }
    let nodes = recursion_a_nodes(params, topology)?;
    Ok(nodes[layer - 1].iter().cloned().fold(0.0, f64::max))
}

/// Coefficients `(a, b)` of the condition `1 - a mu^2 - b mu >= 0`.
fn condition_coefficients(
    params: &TheoryParams,
    topology: &Topology,
) -> Result<(f64, f64), TheoryError> {
    params.validate(topology)?;
    let n = topology.num_layers();
    let l = params.lipschitz;
    let (q, tau) = (&params.q, &params.taus);
    let prod_all: f64 = tau.iter().product();
    if n == 1 {
        let a = l * l * tau[0] * (tau[0] - 1.0) / 2.0;
        return Ok((a, l * prod_all));
    }
    let nodes = recursion_a_nodes(params, topology)?;
    let max_a: Vec<f64> = nodes
        .iter()
        .map(|r| r.iter().cloned().fold(0.0, f64::max))
        .collect();
    let mut quad = vec![tau[0] * (tau[0] - 1.0) / 2.0];
    for layer in 2..=n {
        let t = tau[layer - 1];
        let sq: f64 = tau[..layer - 1].iter().map(|v| v * v).product();
        quad.push(t * (t - 1.0) / 2.0 * sq);
    }
    quad.push(q[0] * tau[1] * tau[0] * tau[0]);
    for layer in 1..=n.saturating_sub(2) {
        quad.push(prefix_product(tau, layer + 2) * max_a[layer - 1]);
    }
    let lin = sum_small_first(vec![prod_all, max_a[n - 2] / topology.num_devices() as f64]);
    Ok((l * l * sum_small_first(quad), l * lin))
}

/// Left side of the convergence condition; the condition holds iff `>= 0`.
pub fn condition_lhs(params: &TheoryParams, topology: &Topology) -> Result<f64, TheoryError> {
    let (a, b) = condition_coefficients(params, topology)?;
    let mu = params.mu;
    Ok(1.0 - a * mu * mu - b * mu)
}

/// Rate bound after `rounds` global rounds.
pub fn rate_bound(
    params: &TheoryParams,
    topology: &Topology,
    rounds: u32,
) -> Result<RateBound, TheoryError> {
    params.validate(topology)?;
    if rounds == 0 {
        return Err(TheoryError::InvalidParameter {
            name: "rounds",
            value: 0.0,
        });
    }
    let speed_term =
        2.0 * params.gap0 / (params.mu * rounds as f64 * params.taus.iter().product::<f64>());
    let error_term = error_term(params, topology);
    Ok(RateBound {
        speed_term,
        error_term,
        total: speed_term + error_term,
    })
}

/// The bracketed drift expression of the error term (without the
/// `L^2 mu^2 sigma^2 / 2` scaling).
pub fn error_bracket(q: &[f64], taus: &[f64], server_counts: &[usize], n_tot: usize) -> f64 {
    let mut terms = vec![taus[0] - 1.0];
    let mut qprod = 1.0;
    let mut tprod = 1.0;
    for (k, &c) in server_counts.iter().enumerate() {
        qprod *= 1.0 + q[k];
        tprod *= taus[k];
        terms.push(c as f64 / n_tot as f64 * (taus[k + 1] - 1.0) * qprod * tprod);
    }
    sum_small_first(terms)
}

fn error_term(params: &TheoryParams, topology: &Topology) -> f64 {
    let l = params.lipschitz;
    let mu = params.mu;
    let n_tot = topology.num_devices() as f64;
    let bracket = error_bracket(
        &params.q,
        &params.taus,
        topology.server_counts(),
        topology.num_devices(),
    );
    let qprod: f64 = params.q.iter().map(|v| 1.0 + v).product();
    sum_small_first(vec![
        l * l * mu * mu / 2.0 * bracket * params.sigma2,
        l * mu * params.sigma2 / n_tot * qprod,
    ])
}

/// Largest learning rate satisfying the condition, by bisection.
pub fn max_feasible_mu(params: &TheoryParams, topology: &Topology) -> Result<f64, TheoryError> {
    let probe = params.with_mu(1.0);
    let (a, b) = condition_coefficients(&probe, topology)?;
    let lhs = |mu: f64| 1.0 - a * mu * mu - b * mu;
    if !(b > 0.0) {
        return Err(TheoryError::NoFeasibleMu);
    }
    // lhs(0) = 1 and lhs(1/b) <= 0 bracket the root
    let (mut lo, mut hi) = (0.0f64, 1.0 / b);
    while (hi - lo) > 1e-10 * hi {
        let mid = 0.5 * (lo + hi);
        if lhs(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if !(lo > 0.0) {
        return Err(TheoryError::NoFeasibleMu);
    }
    Ok(lo)
}

/// Condition with quantization switched off, transcribed term by term.
pub fn corollary1_condition(
    params: &TheoryParams,
    topology: &Topology,
) -> Result<f64, TheoryError> {
    params.validate(topology)?;
    if params.q.iter().any(|&v| v != 0.0) {
        return Err(TheoryError::WrongSpecialization(
            "the unquantized form requires q = 0",
        ));
    }
    let tau = &params.taus;
    let (l, mu) = (params.lipschitz, params.mu);
    let mut bracket = tau[0] * (tau[0] - 1.0) / 2.0;
    for n in 2..=tau.len() {
        let mut sq = 1.0;
        for m in 1..n {
            sq *= tau[m - 1] * tau[m - 1];
        }
        bracket += tau[n - 1] * (tau[n - 1] - 1.0) / 2.0 * sq;
    }
    let prod: f64 = tau.iter().product();
    Ok(1.0 - l * l * mu * mu * bracket - l * mu * prod)
}

/// Rate bound with quantization switched off.
pub fn corollary1_bound(
    params: &TheoryParams,
    topology: &Topology,
    rounds: u32,
) -> Result<RateBound, TheoryError> {
    params.validate(topology)?;
    if params.q.iter().any(|&v| v != 0.0) {
        return Err(TheoryError::WrongSpecialization(
            "the unquantized form requires q = 0",
        ));
    }
    let tau = &params.taus;
    let (l, mu, s2) = (params.lipschitz, params.mu, params.sigma2);
    let n_tot = topology.num_devices() as f64;
    let prod: f64 = tau.iter().product();
    let speed = 2.0 * params.gap0 / (mu * rounds as f64 * prod);
    let mut bracket = tau[0] - 1.0;
    for n in 1..tau.len() {
        let c_n = topology.layer_size(n) as f64;
        let mut tp = 1.0;
        for m in 1..=n {
            tp *= tau[m - 1];
        }
        bracket += c_n / n_tot * (tau[n] - 1.0) * tp;
    }
    let error = l * l * mu * mu / 2.0 * bracket * s2 + l * mu / n_tot * s2;
    Ok(RateBound {
        speed_term: speed,
        error_term: error,
        total: speed + error,
    })
}

/// Two-layer condition, transcribed directly.
pub fn corollary2_condition(
    params: &TheoryParams,
    topology: &Topology,
) -> Result<f64, TheoryError> {
    params.validate(topology)?;
    if topology.num_layers() != 2 {
        return Err(TheoryError::WrongSpecialization(
            "the two-layer form requires N = 2",
        ));
    }
    let (t1, t2) = (params.taus[0], params.taus[1]);
    let (q1, q2) = (params.q[0], params.q[1]);
    let (l, mu) = (params.lipschitz, params.mu);
    let n_tot = topology.num_devices() as f64;
    let worst = topology
        .subtree_counts(1)
        .iter()
        .map(|&c| {
            let c = c as f64;
            c * (q2 * t1 * t2 + 1.0 / c * (1.0 + q2) * q1 * t1)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(1.0
        - l * l
            * mu
            * mu
            * (t1 * (t1 - 1.0) / 2.0 + t1 * t1 * t2 * (t2 - 1.0) / 2.0 + q1 * t2 * t1 * t1)
        - l * mu * (t2 * t1 + worst / n_tot))
}

/// Two-layer rate bound, transcribed directly.
pub fn corollary2_bound(
    params: &TheoryParams,
    topology: &Topology,
    rounds: u32,
) -> Result<RateBound, TheoryError> {
    params.validate(topology)?;
    if topology.num_layers() != 2 {
        return Err(TheoryError::WrongSpecialization(
            "the two-layer form requires N = 2",
        ));
    }
    let (t1, t2) = (params.taus[0], params.taus[1]);
    let (q1, q2) = (params.q[0], params.q[1]);
    let (l, mu, s2) = (params.lipschitz, params.mu, params.sigma2);
    let n_tot = topology.num_devices() as f64;
    let c1 = topology.layer_size(1) as f64;
    let speed = 2.0 * params.gap0 / (mu * rounds as f64 * t2 * t1);
    let error =
        l * l * mu * mu / 2.0 * ((t1 - 1.0) + (1.0 + q1) * (t2 - 1.0) * t1 * c1 / n_tot) * s2
            + l * mu / n_tot * (1.0 + q2) * (1.0 + q1) * s2;
    Ok(RateBound {
        speed_term: speed,
        error_term: error,
        total: speed + error,
    })
}
