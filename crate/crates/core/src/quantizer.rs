//! Unbiased stochastic quantizers and empirical variance measurement.
//!
//! The stochastic-levels quantizer maps each coordinate to
//! `sign(x_i) * ||x|| * zeta_i` where `zeta_i` is one of the two grid points
//! `l/s`, `(l+1)/s` that bracket `|x_i| / ||x||`, picked so that the result
//! is unbiased.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Domain, StreamRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantizerError {
    #[error("quantizer input has a non-finite coordinate at index {index}")]
    NonFiniteInput { index: usize },
    #[error("stochastic quantizer needs at least one level")]
    NoLevels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    Identity,
    StochasticLevels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub kind: QuantizerKind,
    /// Number of levels `s`; ignored by the identity quantizer.
    #[serde(default)]
    pub levels: u32,
    /// Variance constant `q` measured or assumed for this quantizer.
    #[serde(default)]
    pub measured_q: Option<f64>,
}

impl QuantizerSpec {
    pub fn identity() -> Self {
        Self {
            kind: QuantizerKind::Identity,
            levels: 0,
            measured_q: Some(0.0),
        }
    }

    pub fn stochastic(levels: u32) -> Result<Self, QuantizerError> {
        if levels == 0 {
            return Err(QuantizerError::NoLevels);
        }
        Ok(Self {
            kind: QuantizerKind::StochasticLevels,
            levels,
            measured_q: None,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.kind == QuantizerKind::Identity
    }

    pub fn validate(&self) -> Result<(), QuantizerError> {
        if self.kind == QuantizerKind::StochasticLevels && self.levels == 0 {
            return Err(QuantizerError::NoLevels);
        }
        Ok(())
    }

    /// The variance constant to use in analysis: 0 for identity, otherwise
    /// the measured value if present.
    pub fn q(&self) -> Option<f64> {
        match self.kind {
            QuantizerKind::Identity => Some(0.0),
            QuantizerKind::StochasticLevels => self.measured_q,
        }
    }

    /// Quantizes `x`, drawing one uniform per coordinate in index order.
    pub fn quantize<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>, QuantizerError> {
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(QuantizerError::NonFiniteInput { index });
        }
        if self.kind == QuantizerKind::Identity {
            return Ok(x.to_vec());
        }
        self.validate()?;
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(vec![0.0; x.len()]);
        }
        let s = self.levels as f64;
        let out = x
            .iter()
            .map(|&xi| {
                let u: f64 = rng.random();
                let scaled = xi.abs() * s / norm;
                let level = if scaled >= s {
                    s
                } else {
                    let l = scaled.floor().clamp(0.0, s - 1.0);
                    if u < scaled - l {
                        l + 1.0
                    } else {
                        l
                    }
                };
                xi.signum() * (norm * level / s)
            })
            .collect();
        Ok(out)
    }
}

/// Mean of `||Q(x) - x||^2 / ||x||^2` over `trials` independent draws.
pub fn empirical_relative_variance<R: Rng + ?Sized>(
    spec: &QuantizerSpec,
    x: &[f64],
    trials: usize,
    rng: &mut R,
) -> Result<f64, QuantizerError> {
    let norm_sq: f64 = x.iter().map(|v| v * v).sum();
    if norm_sq == 0.0 || spec.is_identity() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for _ in 0..trials {
        let qx = spec.quantize(x, rng)?;
        acc += qx
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(acc / (trials as f64 * norm_sq))
}

/// Probe directions used by [`measure_q`]: normalized Gaussian draws and
/// equal-magnitude k-sparse vectors with random signs.
pub fn probe_directions(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rng::stream(seed, Domain::Measure, &[0]);
    let mut dirs = Vec::new();
    for _ in 0..8 {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 0.0 {
            dirs.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let mut k = 1usize;
    let mut sparsities = Vec::new();
    while k <= dim {
        sparsities.push(k);
        k = if k < 4 { k + 1 } else { k * 3 / 2 };
    }
    if sparsities.last() != Some(&dim) {
        sparsities.push(dim);
    }
    for k in sparsities {
        let mag = 1.0 / (k as f64).sqrt();
        let support = rand::seq::index::sample(&mut rng, dim, k);
        let mut v = vec![0.0; dim];
        for i in support.iter() {
            v[i] = if rng.random::<bool>() { mag } else { -mag };
        }
        dirs.push(v);
    }
    dirs
}

/// Largest empirical relative variance over the probe directions, using
/// `trials` draws per direction. Identity quantizers measure exactly 0.
pub fn measure_q(
    spec: &QuantizerSpec,
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<f64, QuantizerError> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(0.0);
    }
    let mut worst = 0.0f64;
    for (i, dir) in probe_directions(dim, seed).iter().enumerate() {
        let mut r: StreamRng = rng::stream(seed, Domain::Measure, &[1, i as u64]);
        worst = worst.max(empirical_relative_variance(spec, dir, trials, &mut r)?);
    }
    Ok(worst)
}

/// Measures and stores `q` on the spec.
pub fn calibrate(
    spec: &mut QuantizerSpec,
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<f64, QuantizerError> {
    let q = measure_q(spec, dim, trials, seed)?;
    spec.measured_q = Some(q);
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn zero_maps_to_zero() {
        let q = QuantizerSpec::stochastic(3).unwrap();
        assert_eq!(q.quantize(&[0.0; 5], &mut rng()).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn scalar_is_exact() {
        for s in 1..6 {
            let q = QuantizerSpec::stochastic(s).unwrap();
            assert_eq!(q.quantize(&[-2.75], &mut rng()).unwrap(), vec![-2.75]);
        }
    }

    #[test]
    fn grid_aligned_vector_is_exact() {
        let q = QuantizerSpec::stochastic(5).unwrap();
        let mut r = rng();
        for _ in 0..100 {
            assert_eq!(q.quantize(&[3.0, 4.0], &mut r).unwrap(), vec![3.0, 4.0]);
        }
    }

    #[test]
    fn identity_passes_through() {
        let q = QuantizerSpec::identity();
        assert_eq!(
            q.quantize(&[0.1, -0.2], &mut rng()).unwrap(),
            vec![0.1, -0.2]
        );
        assert_eq!(measure_q(&q, 8, 10, 1).unwrap(), 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        let q = QuantizerSpec::stochastic(2).unwrap();
        assert_eq!(
            q.quantize(&[1.0, f64::NAN], &mut rng()),
            Err(QuantizerError::NonFiniteInput { index: 1 })
        );
        assert_eq!(QuantizerSpec::stochastic(0), Err(QuantizerError::NoLevels));
    }

    #[test]
    fn outputs_sit_on_grid() {
        let q = QuantizerSpec::stochastic(4).unwrap();
        let x = [0.3, -1.1, 0.05, 2.0];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y = q.quantize(&x, &mut rng()).unwrap();
        for (a, b) in y.iter().zip(&x) {
            let level = a.abs() * 4.0 / norm;
            assert!((level - level.round()).abs() < 1e-9);
            assert!(a.signum() == b.signum() || *a == 0.0);
        }
    }

    #[test]
    fn finer_grid_measures_smaller_q() {
        let q4 = measure_q(&QuantizerSpec::stochastic(4).unwrap(), 16, 10_000, 3).unwrap();
        let q8 = measure_q(&QuantizerSpec::stochastic(8).unwrap(), 16, 10_000, 3).unwrap();
        assert!(q8 < q4, "q(8)={q8} q(4)={q4}");
    }
}
