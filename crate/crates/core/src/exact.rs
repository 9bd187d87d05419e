//! Exact floating-point accumulation.
//!
//! Aggregation in the engine is carried out on exact sums so that the
//! rounded result of a nested weighted average does not depend on how the
//! tree groups its summands. A value is kept as a nonoverlapping expansion
//! (a list of `f64` components of increasing magnitude whose exact sum is
//! the represented number) and is rounded to `f64` only once, on demand.

use std::cmp::Ordering;

const COMPRESS_AT: usize = 12;

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// An exactly represented real number built from `f64` sums and products.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExactSum {
    parts: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_f64(x: f64) -> Self {
        let mut s = Self::new();
        s.add(x);
        s
    }

    pub fn is_zero(&self) -> bool {
        self.parts.is_empty()
    }

    /// Components, smallest magnitude first.
    pub fn parts(&self) -> &[f64] {
        &self.parts
    }

    /// Adds `x` exactly.
    pub fn add(&mut self, x: f64) {
        debug_assert!(x.is_finite());
        if x == 0.0 {
            return;
        }
        let mut q = x;
        let mut out = 0;
        for i in 0..self.parts.len() {
            let (s, h) = two_sum(q, self.parts[i]);
            if h != 0.0 {
                self.parts[out] = h;
                out += 1;
            }
            q = s;
        }
        self.parts.truncate(out);
        if q != 0.0 {
            self.parts.push(q);
        }
        if self.parts.len() > COMPRESS_AT {
            self.compress();
        }
    }

    /// Adds `a * b` exactly.
    pub fn add_product(&mut self, a: f64, b: f64) {
        let (p, e) = two_prod(a, b);
        self.add(e);
        self.add(p);
    }

    /// Adds `a - b` exactly.
    pub fn add_difference(&mut self, a: f64, b: f64) {
        let (s, e) = two_sum(a, -b);
        self.add(e);
        self.add(s);
    }

    /// Adds `m * (a - b)` exactly.
    pub fn add_scaled_difference(&mut self, m: f64, a: f64, b: f64) {
        let (s, e) = two_sum(a, -b);
        self.add_product(m, e);
        self.add_product(m, s);
    }

    pub fn add_exact(&mut self, other: &ExactSum) {
        for &p in &other.parts {
            self.add(p);
        }
    }

    fn scaled_by_two(&self) -> ExactSum {
        ExactSum {
            parts: self.parts.iter().map(|p| p * 2.0).collect(),
        }
    }

    /// Sign of the represented value.
    pub fn sign(&self) -> Ordering {
        match self.parts.iter().rev().find(|p| **p != 0.0) {
            None => Ordering::Equal,
            Some(p) if *p > 0.0 => Ordering::Greater,
            Some(_) => Ordering::Less,
        }
    }

    /// Nearest-ish `f64`; within a few ulps of the exact value.
    pub fn estimate(&self) -> f64 {
        self.parts.iter().sum()
    }

    /// The exact value rounded to the nearest `f64` (ties to even).
    pub fn to_f64(&self) -> f64 {
        self.div_round(1.0)
    }

    /// `self / m` rounded to nearest, ties to even. `m` must be a positive
    /// integer below 2^53.
    pub fn div_round(&self, m: f64) -> f64 {
        debug_assert!(m > 0.0 && m.fract() == 0.0);
        if self.parts.is_empty() {
            return 0.0;
        }
        let mut q = self.estimate() / m;
        loop {
            let mut rem = self.clone();
            rem.add_product(-q, m);
            match rem.sign() {
                Ordering::Equal => return q,
                Ordering::Greater => {
                    let up = q.next_up();
                    // 2 * remainder against m * spacing decides the half-way test
                    let mut d = rem.scaled_by_two();
                    d.add_product(-m, up - q);
                    match d.sign() {
                        Ordering::Greater => q = up,
                        Ordering::Equal => return even_of(q, up),
                        Ordering::Less => return q,
                    }
                }
                Ordering::Less => {
                    let down = q.next_down();
                    let mut d = rem.scaled_by_two();
                    d.add_product(m, q - down);
                    match d.sign() {
                        Ordering::Less => q = down,
                        Ordering::Equal => return even_of(q, down),
                        Ordering::Greater => return q,
                    }
                }
            }
        }
    }

    fn compress(&mut self) {
        let m = self.parts.len();
        if m < 2 {
            return;
        }
        let mut g = vec![0.0; m];
        let mut bottom = m - 1;
        let mut q = self.parts[m - 1];
        for i in (0..m - 1).rev() {
            let (big, small) = two_sum(q, self.parts[i]);
            if small != 0.0 {
                g[bottom] = big;
                bottom -= 1;
                q = small;
            } else {
                q = big;
            }
        }
        g[bottom] = q;
        let mut out = Vec::with_capacity(m - bottom);
        let mut q = g[bottom];
        for &gi in &g[bottom + 1..] {
            let (big, small) = two_sum(gi, q);
            q = big;
            if small != 0.0 {
                out.push(small);
            }
        }
        if q != 0.0 {
            out.push(q);
        }
        self.parts = out;
    }
}

fn even_of(a: f64, b: f64) -> f64 {
    if a.to_bits() & 1 == 0 {
        a
    } else {
        b
    }
}

/// Exact per-coordinate accumulator for vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactVec {
    coords: Vec<ExactSum>,
}

impl ExactVec {
    pub fn zeros(dim: usize) -> Self {
        Self {
            coords: vec![ExactSum::new(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[ExactSum] {
        &self.coords
    }

    /// `self += m * (a - b)` exactly.
    pub fn add_scaled_difference(&mut self, m: f64, a: &[f64], b: &[f64]) {
        for ((c, &x), &y) in self.coords.iter_mut().zip(a).zip(b) {
            c.add_scaled_difference(m, x, y);
        }
    }

    /// `self += m * x` exactly.
    pub fn add_scaled(&mut self, m: f64, x: &[f64]) {
        for (c, &v) in self.coords.iter_mut().zip(x) {
            c.add_product(m, v);
        }
    }

    pub fn add_exact(&mut self, other: &ExactVec) {
        for (c, o) in self.coords.iter_mut().zip(&other.coords) {
            c.add_exact(o);
        }
    }

    /// Correctly rounded `self / m`.
    pub fn div_round(&self, m: f64) -> Vec<f64> {
        self.coords.iter().map(|c| c.div_round(m)).collect()
    }

    /// Correctly rounded `base + self / m`, computed as one rounding.
    pub fn offset_div_round(&self, base: &[f64], m: f64) -> Vec<f64> {
        self.coords
            .iter()
            .zip(base)
            .map(|(c, &b)| {
                let mut num = c.clone();
                num.add_product(m, b);
                num.div_round(m)
            })
            .collect()
    }
}
