//! Exact accumulation checked against arbitrary-precision rationals.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use proptest::prelude::*;
use qmlhfl::exact::{ExactSum, ExactVec};

fn rat(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap()
}

/// True when `r` is the nearest double to `exact`, ties to even.
fn is_correct_rounding(exact: &BigRational, r: f64) -> bool {
    let d = (exact - rat(r)).abs();
    let up = r.next_up();
    let down = r.next_down();
    let d_up = (exact - rat(up)).abs();
    let d_down = (exact - rat(down)).abs();
    if d > d_up || d > d_down {
        return false;
    }
    if d == d_up || d == d_down {
        return r.to_bits() & 1 == 0;
    }
    true
}

fn wide() -> impl Strategy<Value = f64> {
    (-1.0f64..1.0, -60i32..60).prop_map(|(m, e)| m * 2f64.powi(e))
}

proptest! {
    #[test]
    fn sums_round_correctly(xs in prop::collection::vec(wide(), 1..40)) {
        let mut s = ExactSum::new();
        let mut oracle = BigRational::zero();
        for &x in &xs {
            s.add(x);
            oracle += rat(x);
        }
        prop_assert!(is_correct_rounding(&oracle, s.to_f64()));
    }

    #[test]
    fn scaled_differences_divide_correctly(
        terms in prop::collection::vec((1u32..500, wide(), wide()), 1..20),
        m in 1u32..10_000,
    ) {
        let mut s = ExactSum::new();
        let mut oracle = BigRational::zero();
        for &(w, a, b) in &terms {
            s.add_scaled_difference(w as f64, a, b);
            oracle += BigRational::from_integer(BigInt::from(w)) * (rat(a) - rat(b));
        }
        let exact = oracle / BigRational::from_integer(BigInt::from(m));
        prop_assert!(is_correct_rounding(&exact, s.div_round(m as f64)));
    }

    #[test]
    fn cancellation_leaves_only_the_small_term(big in 1e10f64..1e15, small in -1e-10f64..1e-10) {
        let mut s = ExactSum::new();
        s.add(big);
        s.add(small);
        s.add(-big);
        prop_assert_eq!(s.to_f64(), small);
    }

    #[test]
    fn offset_division_is_one_rounding(
        base in prop::collection::vec(wide(), 3),
        deltas in prop::collection::vec((1u32..50, prop::collection::vec(wide(), 3)), 1..8),
    ) {
        let mut v = ExactVec::zeros(3);
        let mut mass = 0u32;
        for (w, d) in &deltas {
            v.add_scaled(*w as f64, d);
            mass += w;
        }
        let out = v.offset_div_round(&base, mass as f64);
        for i in 0..3 {
            let mut num = BigRational::zero();
            for (w, d) in &deltas {
                num += BigRational::from_integer(BigInt::from(*w)) * rat(d[i]);
            }
            let exact = rat(base[i]) + num / BigRational::from_integer(BigInt::from(mass));
            prop_assert!(is_correct_rounding(&exact, out[i]));
        }
    }
}

#[test]
fn grouping_does_not_change_the_result() {
    let xs = [1e16, 1.0, -1e16, 3.0, 1e-3, 7e15, -7e15];
    let mut flat = ExactSum::new();
    xs.iter().for_each(|&x| flat.add(x));
    let mut left = ExactSum::new();
    let mut right = ExactSum::new();
    xs[..3].iter().for_each(|&x| left.add(x));
    xs[3..].iter().for_each(|&x| right.add(x));
    left.add_exact(&right);
    assert_eq!(flat.to_f64(), left.to_f64());
    assert_eq!(flat.to_f64(), 4.001);
}
