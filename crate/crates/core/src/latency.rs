//! Synchronous per-round latency model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatencyError {
    #[error("schedule has {taus} layers but {edges} inter-edge times imply {expected}")]
    LengthMismatch {
        taus: usize,
        edges: usize,
        expected: usize,
    },
    #[error("device-to-edge link has no capacity (SNR {snr})")]
    NonPositiveRate { snr: f64 },
    #[error("no device CPU frequencies given")]
    NoDevices,
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
}

pub const DEFAULT_PATH_LOSS_EXP: f64 = 3.4;

/// Physical parameters of the latency model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyParams {
    /// CPU cycles per sample.
    pub cycles_per_sample: f64,
    /// Per-device CPU frequencies in Hz.
    pub cpu_freqs: Vec<f64>,
    /// Mini-batch size.
    pub batch_size: f64,
    /// Model payload in bits.
    pub model_bits: f64,
    /// Channel bandwidth in Hz.
    pub bandwidth: f64,
    /// Transmit power in W.
    pub tx_power: f64,
    /// Reference channel gain.
    pub channel_gain: f64,
    /// Noise power in W.
    pub noise_power: f64,
    /// Inter-edge times `t_E(n-1,n)` for `n = 2..=N`, in seconds.
    pub edge_times: Vec<f64>,
    /// Device-to-server distance factor; scales the gain by `kappa^-exp`.
    #[serde(default = "one")]
    pub kappa: f64,
    #[serde(default = "default_exp")]
    pub path_loss_exp: f64,
    /// Completion deadline `T_d` in seconds.
    pub deadline: f64,
    /// Global rounds `T`.
    pub rounds: u32,
}

fn one() -> f64 {
    1.0
}

fn default_exp() -> f64 {
    DEFAULT_PATH_LOSS_EXP
}

/// Result of a deadline check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeadlineCheck {
    pub ok: bool,
    /// `T_d / T - round_latency`; negative when the deadline is missed.
    pub slack: f64,
    pub round_latency: f64,
}

impl LatencyParams {
    /// Run-time constants of the reference wireless setup (1 MHz, 0.5 W,
    /// 1e-10 W noise, 0.25e9 cycles/sample, gain 1e-8), with inter-edge
    /// times `10, 20, ...` multiples of the device hop time.
    pub fn reference(cpu_freqs: Vec<f64>, batch_size: f64, model_bits: f64, layers: usize) -> Self {
        let mut p = Self {
            cycles_per_sample: 0.25e9,
            cpu_freqs,
            batch_size,
            model_bits,
            bandwidth: 1e6,
            tx_power: 0.5,
            channel_gain: 1e-8,
            noise_power: 1e-10,
            edge_times: Vec::new(),
            kappa: 1.0,
            path_loss_exp: DEFAULT_PATH_LOSS_EXP,
            deadline: f64::INFINITY,
            rounds: 1,
        };
        let tde = p.compute_tde().unwrap_or(0.0);
        p.edge_times = (1..layers).map(|n| 10.0 * n as f64 * tde).collect();
        p
    }

    pub fn validate(&self) -> Result<(), LatencyError> {
        let checks = [
            ("cycles_per_sample", self.cycles_per_sample),
            ("model_bits", self.model_bits),
            ("bandwidth", self.bandwidth),
            ("tx_power", self.tx_power),
            ("channel_gain", self.channel_gain),
            ("noise_power", self.noise_power),
            ("kappa", self.kappa),
            ("deadline", self.deadline),
        ];
        for (name, value) in checks {
            if !(value > 0.0) {
                return Err(LatencyError::NonPositive { name, value });
            }
        }
        if self.rounds == 0 {
            return Err(LatencyError::NonPositive {
                name: "rounds",
                value: 0.0,
            });
        }
        if self.cpu_freqs.is_empty() {
            return Err(LatencyError::NoDevices);
        }
        if let Some(&f) = self.cpu_freqs.iter().find(|f| !(**f > 0.0)) {
            return Err(LatencyError::NonPositive {
                name: "cpu_freq",
                value: f,
            });
        }
        Ok(())
    }

    /// Computation time of the slowest device: `c b / f_min`.
    pub fn compute_tcp(&self) -> f64 {
        let f_min = self.cpu_freqs.iter().cloned().fold(f64::INFINITY, f64::min);
        self.cycles_per_sample * self.batch_size / f_min
    }

    /// Effective gain after distance scaling.
    pub fn effective_gain(&self) -> f64 {
        self.channel_gain * self.kappa.powf(-self.path_loss_exp)
    }

    /// Device-to-edge transmission time `d_b / (W log2(1 + p h / N0))`.
    pub fn compute_tde(&self) -> Result<f64, LatencyError> {
        let snr = self.tx_power * self.effective_gain() / self.noise_power;
        let rate = self.bandwidth * snr.ln_1p() / std::f64::consts::LN_2;
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(LatencyError::NonPositiveRate { snr });
        }
        Ok(self.model_bits / rate)
    }

    /// Latency of one global round for the given intra-layer counts.
    pub fn round_latency(&self, taus: &[f64]) -> Result<f64, LatencyError> {
        let n = taus.len();
        if n == 0 || self.edge_times.len() + 1 != n {
            return Err(LatencyError::LengthMismatch {
                taus: n,
                edges: self.edge_times.len(),
                expected: self.edge_times.len() + 1,
            });
        }
        Ok(round_latency_parts(
            taus,
            self.compute_tcp(),
            self.compute_tde()?,
            &self.edge_times,
        ))
    }

    /// `round_latency <= T_d / T`, with the slack.
    pub fn deadline_ok(&self, taus: &[f64]) -> Result<DeadlineCheck, LatencyError> {
        let lat = self.round_latency(taus)?;
        let budget = self.deadline / self.rounds as f64;
        Ok(DeadlineCheck {
            ok: lat <= budget,
            slack: budget - lat,
            round_latency: lat,
        })
    }
}

/// Latency formula on precomputed time constants. `edge_times[k]` is the
/// link from layer `k + 1` to `k + 2`; with a single layer the device hop is
/// the final hop.
pub fn round_latency_parts(taus: &[f64], t_cp: f64, t_de: f64, edge_times: &[f64]) -> f64 {
    let n = taus.len();
    let all: f64 = taus.iter().product();
    if n == 1 {
        return all * t_cp + t_de;
    }
    let above_devices: f64 = taus[1..].iter().product();
    let mut lat = all * t_cp + above_devices * t_de;
    // layers n = 2..N-1 (1-based): prod_{m>n} tau_m * t_E(n-1,n)
    for layer in 2..n {
        let reps: f64 = taus[layer..].iter().product();
        lat += reps * edge_times[layer - 2];
    }
    lat + edge_times[n - 2]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> LatencyParams {
        LatencyParams::reference(vec![0.5e9, 1.2e9, 2e9], 40.0, 5.6724e6, 2)
    }

    #[test]
    fn computation_time() {
        let p = table();
        assert!((p.compute_tcp() - 20.0).abs() < 1e-12);
        let mut q = p.clone();
        q.batch_size = 0.0;
        assert_eq!(q.compute_tcp(), 0.0);
        let mut fast = p.clone();
        fast.cpu_freqs.iter_mut().for_each(|f| *f *= 2.0);
        assert!((fast.compute_tcp() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn transmission_time() {
        let p = table();
        // log2(51) = 5.672425...
        assert!((p.compute_tde().unwrap() - 5.6724e6 / (1e6 * 51f64.log2())).abs() < 1e-12);
        assert!((p.compute_tde().unwrap() - 1.0).abs() < 1e-4);
        let mut far = p.clone();
        far.kappa = 10.0;
        assert!(far.compute_tde().unwrap() > p.compute_tde().unwrap());
        let mut big = p.clone();
        big.model_bits *= 2.0;
        assert!((big.compute_tde().unwrap() - 2.0 * p.compute_tde().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn two_layer_expansion() {
        let p = table();
        let (tcp, tde, te) = (p.compute_tcp(), p.compute_tde().unwrap(), p.edge_times[0]);
        let lat = p.round_latency(&[3.0, 5.0]).unwrap();
        assert_eq!(lat, 15.0 * tcp + 5.0 * tde + te);
    }

    #[test]
    fn all_ones_three_layers() {
        let lat = round_latency_parts(&[1.0, 1.0, 1.0], 2.0, 3.0, &[5.0, 7.0]);
        assert_eq!(lat, 2.0 + 3.0 + 5.0 + 7.0);
        assert_eq!(round_latency_parts(&[4.0], 2.0, 3.0, &[]), 11.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            table().round_latency(&[1.0, 1.0, 1.0]),
            Err(LatencyError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn deadline_boundary() {
        let mut p = table();
        p.rounds = 4;
        let lat = p.round_latency(&[2.0, 2.0]).unwrap();
        p.deadline = 4.0 * lat;
        let c = p.deadline_ok(&[2.0, 2.0]).unwrap();
        assert!(c.ok);
        assert_eq!(c.slack, 0.0);
        p.deadline = 4.0 * lat * (1.0 - 1e-9);
        assert!(!p.deadline_ok(&[2.0, 2.0]).unwrap().ok);
    }
}
