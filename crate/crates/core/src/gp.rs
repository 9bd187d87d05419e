//! Small geometric programs solved in log variables.
//!
//! A posynomial `sum_j c_j prod_i v_i^{a_ji}` becomes the convex function
//! `log sum_j exp(a_j . x + log c_j)` under `v = exp(x)`. Programs are solved
//! with a log-barrier interior-point method and damped Newton steps.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("starting point violates constraint {index} (log value {value})")]
    InfeasibleStart { index: usize, value: f64 },
    #[error("Newton iterations failed to make progress")]
    Stalled,
    #[error("objective is unbounded below on the feasible set")]
    Unbounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Monomial {
    pub coef: f64,
    pub exps: Vec<f64>,
}

impl Monomial {
    pub fn new(coef: f64, exps: Vec<f64>) -> Self {
        Self { coef, exps }
    }

    pub fn constant(coef: f64, dim: usize) -> Self {
        Self::new(coef, vec![0.0; dim])
    }

    /// Value at `v` (not log space).
    pub fn eval(&self, v: &[f64]) -> f64 {
        self.coef
            * self
                .exps
                .iter()
                .zip(v)
                .map(|(a, x)| x.powf(*a))
                .product::<f64>()
    }

    fn log_at(&self, x: &[f64]) -> f64 {
        self.coef.ln() + self.exps.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Posynomial {
    pub terms: Vec<Monomial>,
}

impl Posynomial {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a term, dropping it when the coefficient is not positive.
    pub fn push(&mut self, m: Monomial) {
        if m.coef > 0.0 && m.coef.is_finite() {
            self.terms.push(m);
        }
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(v)).sum()
    }

    /// Divides every term by a monomial.
    pub fn div_monomial(&self, m: &Monomial) -> Posynomial {
        let terms = self
            .terms
            .iter()
            .map(|t| {
                Monomial::new(
                    t.coef / m.coef,
                    t.exps.iter().zip(&m.exps).map(|(a, b)| a - b).collect(),
                )
            })
            .collect();
        Posynomial { terms }
    }

    /// `log P(exp(x))`, numerically stable.
    pub fn log_eval(&self, x: &[f64]) -> f64 {
        let logs: Vec<f64> = self.terms.iter().map(|t| t.log_at(x)).collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return mx;
        }
        mx + logs.iter().map(|l| (l - mx).exp()).sum::<f64>().ln()
    }

    /// Value, gradient and Hessian of `log P(exp(x))`.
    fn log_derivatives(&self, x: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = x.len();
        let logs: Vec<f64> = self.terms.iter().map(|t| t.log_at(x)).collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = w.iter().sum();
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for (t, wi) in self.terms.iter().zip(&w) {
            let p = wi / s;
            let a = DVector::from_column_slice(&t.exps);
            g += p * &a;
            h += p * &a * a.transpose();
        }
        h -= &g * g.transpose();
        (mx + s.ln(), g, h)
    }
}

/// `minimize P_0` subject to `P_i <= 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricProgram {
    pub dim: usize,
    pub objective: Posynomial,
    pub constraints: Vec<Posynomial>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpSettings {
    /// Stop when the duality-gap estimate `m / t` falls below this.
    pub gap_tol: f64,
    pub t0: f64,
    pub t_factor: f64,
    pub max_newton: usize,
}

impl Default for GpSettings {
    fn default() -> Self {
        Self {
            gap_tol: 1e-10,
            t0: 1.0,
            t_factor: 10.0,
            max_newton: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpSolution {
    /// Solution in log space.
    pub x: Vec<f64>,
    /// `log P_0` at the solution.
    pub log_objective: f64,
    pub newton_steps: usize,
}

impl GeometricProgram {
    fn barrier(&self, t: f64, x: &[f64]) -> Option<f64> {
        let mut v = t * self.objective.log_eval(x);
        for c in &self.constraints {
            let f = c.log_eval(x);
            if !(f < 0.0) {
                return None;
            }
            v -= (-f).ln();
        }
        v.is_finite().then_some(v)
    }

    fn barrier_derivatives(&self, t: f64, x: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let (f0, g0, h0) = self.objective.log_derivatives(x);
        let mut val = t * f0;
        let mut g = t * g0;
        let mut h = t * h0;
        for c in &self.constraints {
            let (f, gc, hc) = c.log_derivatives(x);
            let s = -f;
            val -= s.ln();
            g += &gc / s;
            h += &hc / s + &gc * gc.transpose() / (s * s);
        }
        (val, g, h)
    }

    fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> DVector<f64> {
        let n = g.len();
        let scale = h
            .diagonal()
            .iter()
            .cloned()
            .fold(0.0f64, |a, b| a.max(b.abs()))
            .max(1e-300);
        let mut ridge = 0.0;
        loop {
            let m = h + DMatrix::identity(n, n) * ridge;
            if let Some(ch) = m.cholesky() {
                return -ch.solve(g);
            }
            ridge = if ridge == 0.0 {
                1e-12 * scale
            } else {
                ridge * 10.0
            };
            if ridge > 1e12 * scale {
                return -g.clone();
            }
        }
    }

    /// Solves from a strictly feasible `x0`.
    pub fn solve(&self, x0: &[f64], settings: &GpSettings) -> Result<GpSolution, GpError> {
        for (index, c) in self.constraints.iter().enumerate() {
            let value = c.log_eval(x0);
            if !(value < 0.0) {
                return Err(GpError::InfeasibleStart { index, value });
            }
        }
        let m = self.constraints.len().max(1) as f64;
        let mut x = DVector::from_column_slice(x0);
        let mut t = settings.t0;
        let mut steps = 0;
        loop {
            // centering
            for _ in 0..settings.max_newton {
                let (val, g, h) = self.barrier_derivatives(t, x.as_slice());
                let dx = Self::newton_direction(&g, &h);
                let decrement = -g.dot(&dx);
                if decrement / 2.0 <= 1e-12 {
                    break;
                }
                let mut step = 1.0;
                let mut accepted = false;
                for _ in 0..60 {
                    let cand = &x + step * &dx;
                    if let Some(v) = self.barrier(t, cand.as_slice()) {
                        if v <= val - 0.25 * step * decrement {
                            x = cand;
                            accepted = true;
                            break;
                        }
                    }
                    step *= 0.5;
                }
                steps += 1;
                if !accepted {
                    break;
                }
                if x.iter().any(|v| v.abs() > 1e6) {
                    return Err(GpError::Unbounded);
                }
            }
            if m / t < settings.gap_tol {
                break;
            }
            t *= settings.t_factor;
            if !t.is_finite() {
                return Err(GpError::Stalled);
            }
        }
        let x: Vec<f64> = x.iter().cloned().collect();
        Ok(GpSolution {
            log_objective: self.objective.log_eval(&x),
            x,
            newton_steps: steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_bound_is_active() {
        // minimize 1/(u v) s.t. u v / 4 <= 1, u <= 8 -> optimum u v = 4
        let mut obj = Posynomial::new();
        obj.push(Monomial::new(1.0, vec![-1.0, -1.0]));
        let mut c1 = Posynomial::new();
        c1.push(Monomial::new(0.25, vec![1.0, 1.0]));
        let mut c2 = Posynomial::new();
        c2.push(Monomial::new(0.125, vec![1.0, 0.0]));
        let mut c3 = Posynomial::new();
        c3.push(Monomial::new(0.125, vec![0.0, 1.0]));
        let gp = GeometricProgram {
            dim: 2,
            objective: obj,
            constraints: vec![c1, c2, c3],
        };
        let sol = gp.solve(&[0.0, 0.0], &GpSettings::default()).unwrap();
        assert!((sol.log_objective - (0.25f64).ln()).abs() < 1e-8);
    }

    #[test]
    fn posynomial_objective() {
        // minimize u + 1/u -> 2 at u = 1, with a loose bound u <= 100
        let mut obj = Posynomial::new();
        obj.push(Monomial::new(1.0, vec![1.0]));
        obj.push(Monomial::new(1.0, vec![-1.0]));
        let mut c = Posynomial::new();
        c.push(Monomial::new(0.01, vec![1.0]));
        let gp = GeometricProgram {
            dim: 1,
            objective: obj,
            constraints: vec![c],
        };
        let sol = gp.solve(&[1.5], &GpSettings::default()).unwrap();
        assert!((sol.x[0]).abs() < 1e-5);
        assert!((sol.log_objective - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let mut c = Posynomial::new();
        c.push(Monomial::new(2.0, vec![1.0]));
        let gp = GeometricProgram {
            dim: 1,
            objective: c.clone(),
            constraints: vec![c],
        };
        assert!(matches!(
            gp.solve(&[0.0], &GpSettings::default()),
            Err(GpError::InfeasibleStart { .. })
        ));
    }

    #[test]
    fn log_eval_matches_direct() {
        let mut p = Posynomial::new();
        p.push(Monomial::new(3.0, vec![2.0, -1.0]));
        p.push(Monomial::new(0.5, vec![0.0, 1.0]));
        p.push(Monomial::new(0.0, vec![1.0, 1.0]));
        assert_eq!(p.terms.len(), 2);
        let v = [1.7f64, 0.4];
        let x = [v[0].ln(), v[1].ln()];
        assert!((p.log_eval(&x) - p.eval(&v).ln()).abs() < 1e-14);
    }
}
