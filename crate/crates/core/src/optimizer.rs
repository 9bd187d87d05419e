//! Choice of intra-layer iteration counts under a completion deadline.
//!
//! The objective trades the speed term `prod tau^-1` against the drift
//! bracket of the error term. It is a difference of posynomials
//! `J+ - J-`; [`optimize`] minimizes it through a sequence of geometric
//! programs in which `J- + delta` is replaced by its weighted
//! arithmetic-geometric mean monomial.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{GeometricProgram, GpError, GpSettings, Monomial, Posynomial};
use crate::latency::{LatencyError, LatencyParams};
use crate::theory::error_bracket;
use crate::topology::Topology;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("iteration counts must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("even one iteration per layer misses the deadline (round latency {round_latency} > budget {budget})")]
    NoFeasiblePoint { round_latency: f64, budget: f64 },
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("{what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("exhaustive search over {points} points exceeds the limit")]
    SearchTooLarge { points: f64 },
    #[error("closed form does not apply: {0}")]
    RegimeViolation(String),
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error("geometric program failed: {0}")]
    Subproblem(#[from] GpError),
}

pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// Everything the objective and the deadline depend on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub alpha: f64,
    /// Servers per edge layer `C_1 .. C_{N-1}`.
    pub server_counts: Vec<usize>,
    pub num_devices: usize,
    /// Quantizer constants `q_1 .. q_N`.
    pub q: Vec<f64>,
    /// Latency constants, deadline and round count.
    pub latency: LatencyParams,
    /// Reference value dividing the speed term.
    #[serde(default = "one")]
    pub speed_ref: f64,
    /// Reference value dividing the error bracket.
    #[serde(default = "one")]
    pub error_ref: f64,
    /// Optional cap on every count, applied to the continuous problem too.
    #[serde(default)]
    pub tau_max: Option<u32>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    /// Relative tolerance on successive `delta` values.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iters: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerResult {
    pub taus_continuous: Vec<f64>,
    pub taus_integer: Vec<u32>,
    pub objective_continuous: f64,
    pub objective_integer: f64,
    /// Geometric programs solved.
    pub iterations: usize,
    pub converged: bool,
    /// Deadline slack of the integer solution, in seconds per round.
    pub slack: f64,
    pub round_latency: f64,
    /// `delta^0, delta^1, ...`; non-increasing.
    pub deltas: Vec<f64>,
}

/// AGMA weights. `constant` and `delta` together form the grouped weight
/// of the `(1 - alpha) + delta` part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgmaWeights {
    pub constant: f64,
    pub delta: f64,
    pub layers: Vec<f64>,
}

impl AgmaWeights {
    pub fn beta0(&self) -> f64 {
        self.constant + self.delta
    }

    pub fn sum(&self) -> f64 {
        self.beta0() + self.layers.iter().sum::<f64>()
    }
}

/// Evaluation budget of [`refine_integers`].
const REFINE_LIMIT: usize = 2_000_000;

struct Times {
    t_cp: f64,
    t_de: f64,
    edges: Vec<f64>,
    budget: f64,
}

impl ObjectiveSpec {
    pub fn from_topology(
        topology: &Topology,
        q: Vec<f64>,
        latency: LatencyParams,
        alpha: f64,
    ) -> Self {
        Self {
            alpha,
            server_counts: topology.server_counts().to_vec(),
            num_devices: topology.num_devices(),
            q,
            latency,
            speed_ref: 1.0,
            error_ref: 1.0,
            tau_max: None,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.server_counts.len() + 1
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(OptimizerError::InvalidAlpha(self.alpha));
        }
        let n = self.num_layers();
        if self.q.len() != n {
            return Err(OptimizerError::LengthMismatch {
                what: "q",
                expected: n,
                found: self.q.len(),
            });
        }
        if self.latency.edge_times.len() + 1 != n {
            return Err(OptimizerError::LengthMismatch {
                what: "edge_times",
                expected: n - 1,
                found: self.latency.edge_times.len(),
            });
        }
        self.latency.validate()?;
        Ok(())
    }

    fn speed_weight(&self) -> f64 {
        self.alpha / self.speed_ref
    }

    fn error_weight(&self) -> f64 {
        (1.0 - self.alpha) / self.error_ref
    }

    /// `c_k = (C_k / N_tot) prod_{m<=k} (1 + q_m)` for `k = 1..N-1`.
    pub fn layer_coefficients(&self) -> Vec<f64> {
        let mut qprod = 1.0;
        self.server_counts
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                qprod *= 1.0 + self.q[k];
                c as f64 / self.num_devices as f64 * qprod
            })
            .collect()
    }

    fn times(&self) -> Result<Times, OptimizerError> {
        Ok(Times {
            t_cp: self.latency.compute_tcp(),
            t_de: self.latency.compute_tde()?,
            edges: self.latency.edge_times.clone(),
            budget: self.latency.deadline / self.latency.rounds as f64,
        })
    }

    /// Deadline constraint `G(tau) <= 1` as a posynomial over `n` variables
    /// (extra trailing variables get zero exponents).
    fn deadline_posynomial(&self, times: &Times, vars: usize) -> Posynomial {
        let n = self.num_layers();
        let scale = 1.0 / times.budget;
        let tail = |from: usize| -> Vec<f64> {
            (0..vars)
                .map(|i| if i >= from && i < n { 1.0 } else { 0.0 })
                .collect()
        };
        let mut g = Posynomial::new();
        g.push(Monomial::new(scale * times.t_cp, tail(0)));
        if n == 1 {
            g.push(Monomial::new(scale * times.t_de, tail(n)));
        } else {
            g.push(Monomial::new(scale * times.t_de, tail(1)));
            // layer n = 2..N-1 (1-based) repeats prod_{m > n} tau_m times
            for layer in 2..n {
                g.push(Monomial::new(scale * times.edges[layer - 2], tail(layer)));
            }
            g.push(Monomial::new(scale * times.edges[n - 2], tail(n)));
        }
        g
    }

    /// `J+` over `vars` variables.
    fn j_plus(&self, vars: usize) -> Posynomial {
        let n = self.num_layers();
        let prefix = |upto: usize, sign: f64| -> Vec<f64> {
            (0..vars)
                .map(|i| if i < upto { sign } else { 0.0 })
                .collect()
        };
        let ew = self.error_weight();
        let mut p = Posynomial::new();
        p.push(Monomial::new(self.speed_weight(), prefix(n, -1.0)));
        p.push(Monomial::new(ew, prefix(1, 1.0)));
        for (k, c) in self.layer_coefficients().iter().enumerate() {
            p.push(Monomial::new(ew * c, prefix(k + 2, 1.0)));
        }
        p
    }

    /// Monomial parts of `J-`: the constant, then one per edge layer.
    fn j_minus_parts(&self, vars: usize) -> Vec<Monomial> {
        let prefix = |upto: usize| -> Vec<f64> {
            (0..vars)
                .map(|i| if i < upto { 1.0 } else { 0.0 })
                .collect()
        };
        let ew = self.error_weight();
        let mut parts = vec![Monomial::new(ew, prefix(0))];
        for (k, c) in self.layer_coefficients().iter().enumerate() {
            parts.push(Monomial::new(ew * c, prefix(k + 1)));
        }
        parts
    }

    pub fn j_plus_value(&self, taus: &[f64]) -> f64 {
        self.j_plus(taus.len()).eval(taus)
    }

    pub fn j_minus_value(&self, taus: &[f64]) -> f64 {
        self.j_minus_parts(taus.len())
            .iter()
            .map(|m| m.eval(taus))
            .sum()
    }

    /// Weighted objective at (possibly fractional) counts.
    pub fn objective(&self, taus: &[f64]) -> Result<f64, OptimizerError> {
        let n = self.num_layers();
        if taus.len() != n {
            return Err(OptimizerError::LengthMismatch {
                what: "taus",
                expected: n,
                found: taus.len(),
            });
        }
        if let Some(&t) = taus.iter().find(|t| !(**t > 0.0)) {
            return Err(OptimizerError::NonPositiveTau(t));
        }
        let speed: f64 = taus.iter().map(|t| 1.0 / t).product();
        let bracket = error_bracket(&self.q, taus, &self.server_counts, self.num_devices);
        Ok(self.speed_weight() * speed + self.error_weight() * bracket)
    }

    pub fn deadline_ok(&self, taus: &[u32]) -> Result<bool, OptimizerError> {
        let t: Vec<f64> = taus.iter().map(|&v| v as f64).collect();
        Ok(self.latency.deadline_ok(&t)?.ok)
    }
}

/// AGMA weights at `(taus, delta)`: each part of `J- + delta` over the total.
pub fn agma_betas(spec: &ObjectiveSpec, taus: &[f64], delta: f64) -> AgmaWeights {
    let parts: Vec<f64> = spec
        .j_minus_parts(taus.len())
        .iter()
        .map(|m| m.eval(taus))
        .collect();
    let total = parts.iter().sum::<f64>() + delta;
    AgmaWeights {
        constant: parts[0] / total,
        delta: delta / total,
        layers: parts[1..].iter().map(|p| p / total).collect(),
    }
}

/// The monomial `prod (u_i / beta_i)^beta_i` approximating `J- + delta`
/// from below, over variables `(tau_1..tau_N, delta)`.
pub fn agma_monomial(spec: &ObjectiveSpec, betas: &AgmaWeights) -> Monomial {
    let n = spec.num_layers();
    let vars = n + 1;
    let mut parts = spec.j_minus_parts(vars);
    parts.push(Monomial::new(
        1.0,
        (0..vars).map(|i| if i == n { 1.0 } else { 0.0 }).collect(),
    ));
    let mut weights = vec![betas.constant];
    weights.extend(&betas.layers);
    weights.push(betas.delta);
    let mut log_coef = 0.0;
    let mut exps = vec![0.0; vars];
    for (m, &b) in parts.iter().zip(&weights) {
        if b > 0.0 && m.coef > 0.0 {
            log_coef += b * (m.coef / b).ln();
            for (e, a) in exps.iter_mut().zip(&m.exps) {
                *e += b * a;
            }
        }
    }
    Monomial::new(log_coef.exp(), exps)
}

/// Floor on `delta`, keeping the subproblem bounded when the objective can
/// reach zero.
fn delta_floor(spec: &ObjectiveSpec) -> f64 {
    1e-12
        * spec
            .speed_weight()
            .max(spec.error_weight())
            .max(f64::MIN_POSITIVE)
}

/// One condensation step: solves the geometric program built at
/// `(taus, delta)` and returns the next point.
pub fn agma_step(
    spec: &ObjectiveSpec,
    taus: &[f64],
    delta: f64,
) -> Result<(Vec<f64>, f64), OptimizerError> {
    let times = spec.times()?;
    let n = spec.num_layers();
    let vars = n + 1;
    let betas = agma_betas(spec, taus, delta);
    let approx = agma_monomial(spec, &betas);
    let mut constraints = vec![
        spec.deadline_posynomial(&times, vars),
        spec.j_plus(vars).div_monomial(&approx),
    ];
    for i in 0..n {
        let mut e = vec![0.0; vars];
        e[i] = -1.0;
        constraints.push(Posynomial {
            terms: vec![Monomial::new(1.0, e.clone())],
        });
        if let Some(cap) = spec.tau_max {
            e[i] = 1.0;
            constraints.push(Posynomial {
                terms: vec![Monomial::new(1.0 / cap as f64, e)],
            });
        }
    }
    let floor = delta_floor(spec);
    let mut e = vec![0.0; vars];
    e[n] = -1.0;
    constraints.push(Posynomial {
        terms: vec![Monomial::new(floor, e)],
    });
    let mut objective = Posynomial::new();
    objective.push(Monomial::new(
        1.0,
        (0..vars).map(|i| if i == n { 1.0 } else { 0.0 }).collect(),
    ));
    let gp = GeometricProgram {
        dim: vars,
        objective,
        constraints,
    };

    let start = strict_start(spec, &times, &gp, taus, delta, &approx)?;
    let sol = gp.solve(&start, &GpSettings::default())?;
    let next: Vec<f64> = sol.x[..n].iter().map(|y| y.exp()).collect();
    Ok((next, sol.x[n].exp()))
}

/// Interior starting point: pulls `taus` slightly toward a strictly
/// feasible center and lifts `delta` until the approximated constraint
/// holds strictly.
fn strict_start(
    spec: &ObjectiveSpec,
    times: &Times,
    gp: &GeometricProgram,
    taus: &[f64],
    delta: f64,
    approx: &Monomial,
) -> Result<Vec<f64>, OptimizerError> {
    let n = spec.num_layers();
    let g = spec.deadline_posynomial(times, n);
    let g_one = g.eval(&vec![1.0; n]);
    // center: all counts equal to exp(rho) with G at the midpoint of [G(1), 1]
    let target = (0.5 * (g_one + 1.0)).ln();
    let mut rho = match spec.tau_max {
        Some(cap) if cap > 1 => (cap as f64).ln() * 0.5,
        _ => 1.0,
    };
    while g.log_eval(&vec![rho; n]) >= target {
        rho *= 0.5;
        if rho < 1e-300 {
            return Err(OptimizerError::NoFeasiblePoint {
                round_latency: g_one * times.budget,
                budget: times.budget,
            });
        }
    }
    let theta = 1e-3;
    let mut x: Vec<f64> = taus
        .iter()
        .map(|t| (1.0 - theta) * t.ln().max(0.0) + theta * rho)
        .collect();
    if let Some(cap) = spec.tau_max {
        let lim = (cap as f64).ln();
        for v in x.iter_mut() {
            *v = v.min(lim - theta * (lim - rho));
        }
    }
    // lift log delta so that J+ / J~- <= exp(-margin)
    let beta_delta = approx.exps[n];
    let mut z = delta.max(delta_floor(spec) * 2.0).ln();
    x.push(z);
    let j = &gp.constraints[1];
    let val = j.log_eval(&x);
    let margin = 1e-6;
    if val > -margin && beta_delta > 0.0 {
        z += (val + margin) / beta_delta;
        x[n] = z;
    }
    Ok(x)
}

struct Condensed {
    taus: Vec<f64>,
    deltas: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Condensation loop from `start`, which must meet the deadline.
fn condense(
    spec: &ObjectiveSpec,
    settings: &OptimizerSettings,
    start: Vec<f64>,
) -> Result<Condensed, OptimizerError> {
    let mut deltas = vec![spec
        .objective(&start)?
        .max(settings.tolerance)
        .max(delta_floor(spec))];
    let mut taus = start;
    let mut converged = false;
    let mut iterations = 0;
    while !converged && iterations < settings.max_iters {
        let prev = *deltas.last().unwrap();
        let (next_taus, next_delta) = agma_step(spec, &taus, prev)?;
        iterations += 1;
        if next_delta >= prev {
            converged = true;
            break;
        }
        taus = next_taus;
        deltas.push(next_delta);
        if (prev - next_delta).abs() < settings.tolerance * prev {
            converged = true;
        }
    }
    Ok(Condensed {
        taus,
        deltas,
        iterations,
        converged,
    })
}

/// Largest count for `layer` meeting the deadline with every other count at 1.
fn single_layer_extent(spec: &ObjectiveSpec, layer: usize) -> Result<f64, OptimizerError> {
    let budget = spec.latency.deadline / spec.latency.rounds as f64;
    let mut t = vec![1.0; spec.num_layers()];
    let fits = |t: &[f64]| -> Result<bool, OptimizerError> {
        Ok(spec.latency.round_latency(t)? <= budget)
    };
    let cap = spec.tau_max.map_or(f64::INFINITY, |c| c as f64);
    let mut hi = 2.0f64.min(cap);
    t[layer] = hi;
    while hi < cap && fits(&t)? {
        hi = (hi * 2.0).min(cap);
        t[layer] = hi;
    }
    if fits(&t)? {
        return Ok(hi);
    }
    let mut lo = 1.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        t[layer] = mid;
        if fits(&t)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Runs the condensation loop and rounds the result to integers.
///
/// The problem is not convex, so the loop is started from all ones and from
/// each single-layer extreme point (one count taking most of the deadline);
/// the best rounded result wins.
pub fn optimize(
    spec: &ObjectiveSpec,
    settings: &OptimizerSettings,
) -> Result<OptimizerResult, OptimizerError> {
    spec.validate()?;
    let n = spec.num_layers();
    let times = spec.times()?;
    let ones = vec![1.0; n];
    let lat_one = spec.latency.round_latency(&ones)?;
    if lat_one > times.budget {
        return Err(OptimizerError::NoFeasiblePoint {
            round_latency: lat_one,
            budget: times.budget,
        });
    }
    // the deadline admits nothing but all ones
    let boundary_only =
        spec.deadline_posynomial(&times, n).eval(&ones) >= 1.0 || spec.tau_max == Some(1);
    let mut starts = vec![ones.clone()];
    if !boundary_only {
        for layer in 0..n {
            let extent = single_layer_extent(spec, layer)?;
            if extent > 1.0 + 1e-9 {
                let mut s = ones.clone();
                // stay inside the deadline
                s[layer] = 1.0 + 0.9 * (extent - 1.0);
                starts.push(s);
            }
        }
    }
    let mut best: Option<(Condensed, Vec<u32>, f64, f64)> = None;
    let mut iterations = 0;
    for start in starts {
        let run = if boundary_only {
            Condensed {
                deltas: vec![spec
                    .objective(&start)?
                    .max(settings.tolerance)
                    .max(delta_floor(spec))],
                taus: start,
                iterations: 0,
                converged: true,
            }
        } else {
            condense(spec, settings, start)?
        };
        iterations += run.iterations;
        let ints = round_to_integers(spec, &run.taus)?;
        let t_int: Vec<f64> = ints.iter().map(|&v| v as f64).collect();
        let obj_int = spec.objective(&t_int)?;
        let obj_cont = spec.objective(&run.taus)?;
        let better = best
            .as_ref()
            .is_none_or(|(_, _, bi, bc)| obj_int < *bi || (obj_int == *bi && obj_cont < *bc));
        if better {
            best = Some((run, ints, obj_int, obj_cont));
        }
    }
    let (run, taus_integer, objective_integer, objective_continuous) =
        best.expect("at least one start");
    let t_int: Vec<f64> = taus_integer.iter().map(|&v| v as f64).collect();
    let check = spec.latency.deadline_ok(&t_int)?;
    Ok(OptimizerResult {
        objective_continuous,
        objective_integer,
        taus_continuous: run.taus,
        taus_integer,
        iterations,
        converged: run.converged,
        slack: check.slack,
        round_latency: check.round_latency,
        deltas: run.deltas,
    })
}

/// Floors each count (at least 1), then repeatedly raises the coordinate
/// with the best objective improvement while the deadline holds, then
/// polishes with [`refine_integers`].
pub fn round_to_integers(spec: &ObjectiveSpec, taus: &[f64]) -> Result<Vec<u32>, OptimizerError> {
    let cap = spec.tau_max.unwrap_or(u32::MAX);
    let mut cur: Vec<u32> = taus
        .iter()
        .map(|t| (t.floor().max(1.0) as u32).min(cap))
        .collect();
    // floating-point slack can push a floor just past the deadline
    while !spec.deadline_ok(&cur)? {
        match (0..cur.len())
            .filter(|&i| cur[i] > 1)
            .max_by_key(|&i| cur[i])
        {
            Some(i) => cur[i] -= 1,
            None => break,
        }
    }
    let as_f64 = |v: &[u32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
    let mut best = spec.objective(&as_f64(&cur))?;
    loop {
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..cur.len() {
            if cur[i] >= cap {
                continue;
            }
            let mut cand = cur.clone();
            cand[i] += 1;
            if !spec.deadline_ok(&cand)? {
                continue;
            }
            let v = spec.objective(&as_f64(&cand))?;
            if v < best && pick.is_none_or(|(_, pv)| v < pv) {
                pick = Some((i, v));
            }
        }
        match pick {
            Some((i, v)) => {
                cur[i] += 1;
                best = v;
            }
            None => return refine_integers(spec, cur),
        }
    }
}

/// Pairwise integer search: for every pair of layers, scans all
/// deadline-feasible values of the pair with the others fixed and moves to
/// the best strict improvement, until no pair improves.
pub fn refine_integers(spec: &ObjectiveSpec, start: Vec<u32>) -> Result<Vec<u32>, OptimizerError> {
    let n = start.len();
    let cap = spec.tau_max.unwrap_or(u32::MAX);
    let value = |v: &[u32]| -> Result<f64, OptimizerError> {
        spec.objective(&v.iter().map(|&x| x as f64).collect::<Vec<_>>())
    };
    let mut cur = start;
    let mut best = value(&cur)?;
    let pairs: Vec<(usize, usize)> = if n == 1 {
        vec![(0, 0)]
    } else {
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect()
    };
    let mut evals = 0usize;
    loop {
        let mut improved = false;
        for &(i, j) in &pairs {
            let mut cand = cur.clone();
            let mut a = 1;
            // latency grows in every count, so each scan stops at the first miss
            'outer: while a <= cap {
                cand[i] = a;
                let mut b = 1;
                loop {
                    if j != i {
                        cand[j] = b;
                    }
                    evals += 1;
                    if evals > REFINE_LIMIT || !spec.deadline_ok(&cand)? {
                        if b == 1 {
                            break 'outer;
                        }
                        break;
                    }
                    let v = value(&cand)?;
                    if v < best {
                        best = v;
                        cur = cand.clone();
                        improved = true;
                    }
                    if j == i || b >= cap {
                        break;
                    }
                    b += 1;
                }
                a += 1;
            }
        }
        if !improved || evals > REFINE_LIMIT {
            return Ok(cur);
        }
    }
}

/// Exhaustive search over `{1..tau_max}^N`; ties keep the lexicographically
/// smallest vector.
pub fn brute_force(spec: &ObjectiveSpec, tau_max: u32) -> Result<(Vec<u32>, f64), OptimizerError> {
    spec.validate()?;
    let n = spec.num_layers();
    let points = (tau_max as f64).powi(n as i32);
    if points > BRUTE_FORCE_LIMIT {
        return Err(OptimizerError::SearchTooLarge { points });
    }
    let mut cur = vec![1u32; n];
    let mut best: Option<(Vec<u32>, f64)> = None;
    loop {
        if spec.deadline_ok(&cur)? {
            let t: Vec<f64> = cur.iter().map(|&v| v as f64).collect();
            let v = spec.objective(&t)?;
            if best.as_ref().is_none_or(|(_, bv)| v < *bv) {
                best = Some((cur.clone(), v));
            }
        }
        // odometer with the last coordinate fastest
        let mut i = n;
        loop {
            if i == 0 {
                let budget = spec.latency.deadline / spec.latency.rounds as f64;
                return best.ok_or(OptimizerError::NoFeasiblePoint {
                    round_latency: spec.latency.round_latency(&vec![1.0; n])?,
                    budget,
                });
            }
            i -= 1;
            if cur[i] < tau_max {
                cur[i] += 1;
                break;
            }
            cur[i] = 1;
        }
    }
}

/// Closed-form optimum when communication is negligible: all counts but one
/// equal 1 and the selected layer takes the whole budget `T_d / (T t_CP)`.
/// The selected layer has the smallest error coefficient; ties go to the
/// higher layer.
pub fn closed_form_computation_limited(spec: &ObjectiveSpec) -> Result<Vec<f64>, OptimizerError> {
    spec.validate()?;
    let times = spec.times()?;
    let comm = times.edges.iter().cloned().fold(times.t_de, f64::max);
    if comm > 1e-9 * times.t_cp {
        return Err(OptimizerError::RegimeViolation(format!(
            "communication time {comm} is not negligible next to computation time {}",
            times.t_cp
        )));
    }
    let ratio = times.budget / times.t_cp;
    if ratio < 1.0 {
        return Err(OptimizerError::RegimeViolation(format!(
            "budget ratio {ratio} is below 1"
        )));
    }
    // raising tau_1 costs 1 per step; raising tau_{k+1} costs c_k
    let mut coefs = vec![1.0];
    coefs.extend(spec.layer_coefficients());
    let mut layer = 0;
    for (i, &c) in coefs.iter().enumerate() {
        if c <= coefs[layer] {
            layer = i;
        }
    }
    let mut taus = vec![1.0; spec.num_layers()];
    taus[layer] = ratio;
    Ok(taus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latency(layers: usize, deadline: f64, rounds: u32) -> LatencyParams {
        let mut p = LatencyParams::reference(vec![0.5e9, 1e9], 40.0, 5.6724e6, layers);
        p.deadline = deadline;
        p.rounds = rounds;
        p
    }

    fn spec(alpha: f64) -> ObjectiveSpec {
        let topo = Topology::uniform(&[3, 2, 2]).unwrap();
        ObjectiveSpec::from_topology(
            &topo,
            vec![0.1, 0.2, 0.3],
            latency(3, 10.0 * 400.0, 10),
            alpha,
        )
    }

    #[test]
    fn objective_at_ones_is_alpha() {
        let s = spec(0.3);
        assert!((s.objective(&[1.0, 1.0, 1.0]).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(
            s.objective(&[1.0, 0.0, 1.0]),
            Err(OptimizerError::NonPositiveTau(_))
        ));
    }

    #[test]
    fn objective_special_values() {
        let topo = Topology::uniform(&[2, 2]).unwrap();
        let s = ObjectiveSpec::from_topology(&topo, vec![0.0, 0.0], latency(2, 1e6, 1), 0.0);
        assert_eq!(s.objective(&[2.0, 1.0]).unwrap(), 1.0);
        let s1 = ObjectiveSpec { alpha: 1.0, ..s };
        assert_eq!(s1.objective(&[2.0, 4.0]).unwrap(), 0.125);
    }

    #[test]
    fn objective_is_j_plus_minus_j_minus() {
        let s = spec(0.4);
        let t = [2.5, 1.5, 3.0];
        let diff = s.j_plus_value(&t) - s.j_minus_value(&t);
        assert!((s.objective(&t).unwrap() - diff).abs() < 1e-12);
    }

    #[test]
    fn betas_partition_unity() {
        let s = spec(0.4);
        let b = agma_betas(&s, &[2.0, 3.0, 1.5], 0.7);
        assert!((b.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn agma_touches_at_expansion_point() {
        let s = spec(0.4);
        let t = [2.0, 3.0, 1.5];
        let d = 0.7;
        let m = agma_monomial(&s, &agma_betas(&s, &t, d));
        let exact = s.j_minus_value(&t) + d;
        assert!((m.eval(&[2.0, 3.0, 1.5, d]) - exact).abs() < 1e-12 * exact);
        // elsewhere it is a lower bound
        assert!(m.eval(&[4.0, 1.0, 2.0, 0.2]) <= s.j_minus_value(&[4.0, 1.0, 2.0]) + 0.2);
    }

    #[test]
    fn optimize_is_feasible_and_monotone() {
        let s = spec(0.6);
        let r = optimize(&s, &OptimizerSettings::default()).unwrap();
        assert!(r.slack >= 0.0);
        assert!(r.deltas.windows(2).all(|w| w[1] <= w[0]));
        let (_, bf) = brute_force(&s, 40).unwrap();
        assert!(
            r.objective_integer <= 1.02 * bf,
            "{} vs {}",
            r.objective_integer,
            bf
        );
    }

    #[test]
    fn infeasible_deadline() {
        let s = ObjectiveSpec {
            latency: latency(3, 1.0, 10),
            ..spec(0.5)
        };
        assert!(matches!(
            optimize(&s, &OptimizerSettings::default()),
            Err(OptimizerError::NoFeasiblePoint { .. })
        ));
    }

    #[test]
    fn brute_force_one_layer() {
        let topo = Topology::uniform(&[4]).unwrap();
        // budget 20 * 7 + t_de: tau_1 <= 7
        let mut lat = latency(1, 0.0, 1);
        lat.deadline = 20.0 * 7.0 + lat.compute_tde().unwrap();
        let s = ObjectiveSpec::from_topology(&topo, vec![0.0], lat, 1.0);
        assert_eq!(brute_force(&s, 20).unwrap().0, vec![7]);
        let s0 = ObjectiveSpec { alpha: 0.0, ..s };
        assert_eq!(brute_force(&s0, 20).unwrap().0, vec![1]);
    }

    #[test]
    fn closed_form_picks_top_layer_without_quantization() {
        let topo = Topology::uniform(&[3, 2, 2]).unwrap();
        let mut lat = latency(3, 8.0 * 20.0 * 5.0, 5);
        lat.model_bits = 1e-6;
        lat.edge_times = vec![1e-12, 1e-12];
        let s = ObjectiveSpec::from_topology(&topo, vec![0.0; 3], lat, 0.5);
        let t = closed_form_computation_limited(&s).unwrap();
        assert_eq!(t[..2], [1.0, 1.0]);
        assert!((t[2] - 8.0).abs() < 1e-9);
    }

    #[test]
    fn closed_form_rejects_slow_links() {
        assert!(matches!(
            closed_form_computation_limited(&spec(0.5)),
            Err(OptimizerError::RegimeViolation(_))
        ));
    }
}
