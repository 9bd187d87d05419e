//! Convergence theory: learning-rate feasibility, bound scaling and the
//! specialized forms.

use proptest::prelude::*;
use qmlhfl::theory::{self, TheoryError, TheoryParams};
use qmlhfl::topology::Topology;

fn params(q: Vec<f64>, taus: Vec<f64>) -> TheoryParams {
    TheoryParams {
        lipschitz: 2.0,
        sigma2: 0.3,
        mu: 0.01,
        gap0: 1.5,
        q,
        taus,
    }
}

fn small_params() -> impl Strategy<Value = (Vec<usize>, TheoryParams)> {
    (1usize..4).prop_flat_map(|n| {
        (
            prop::collection::vec(1usize..4, n),
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(1u32..6, n),
            0.5f64..5.0,
            0.0f64..2.0,
        )
            .prop_map(|(fan, q, taus, l, s2)| {
                let p = TheoryParams {
                    lipschitz: l,
                    sigma2: s2,
                    mu: 0.01,
                    gap0: 1.0,
                    q,
                    taus: taus.into_iter().map(f64::from).collect(),
                };
                (fan, p)
            })
    })
}

proptest! {
    #[test]
    fn largest_feasible_rate_is_the_root(( fan, p ) in small_params()) {
        let topo = Topology::uniform(&fan).unwrap();
        let mu_max = theory::max_feasible_mu(&p, &topo).unwrap();
        prop_assert!(theory::condition_lhs(&p.with_mu(mu_max), &topo).unwrap() >= 0.0);
        prop_assert!(theory::condition_lhs(&p.with_mu(mu_max * (1.0 + 1e-8)), &topo).unwrap() < 0.0);
        // the condition is 1 - a mu^2 - b mu; recover a, b from two values and solve
        let f1 = 1.0 - theory::condition_lhs(&p.with_mu(1.0), &topo).unwrap();
        let f2 = 1.0 - theory::condition_lhs(&p.with_mu(2.0), &topo).unwrap();
        let a = (f2 - 2.0 * f1) / 2.0;
        let b = f1 - a;
        let root = if a.abs() < 1e-300 { 1.0 / b } else { (-b + (b * b + 4.0 * a).sqrt()) / (2.0 * a) };
        prop_assert!((mu_max - root).abs() <= 1e-8 * root);
    }

    #[test]
    fn doubling_rounds_halves_the_speed_term((fan, p) in small_params(), rounds in 1u32..1000) {
        let topo = Topology::uniform(&fan).unwrap();
        let a = theory::rate_bound(&p, &topo, rounds).unwrap();
        let b = theory::rate_bound(&p, &topo, 2 * rounds).unwrap();
        prop_assert!((a.speed_term - 2.0 * b.speed_term).abs() <= 1e-14 * a.speed_term);
        prop_assert_eq!(a.error_term, b.error_term);
    }

    #[test]
    fn error_grows_with_quantizer_noise((fan, p) in small_params(), layer in 0usize..3, extra in 0.01f64..1.0) {
        let topo = Topology::uniform(&fan).unwrap();
        let layer = layer % fan.len();
        let mut noisier = p.clone();
        noisier.q[layer] += extra;
        let e0 = theory::rate_bound(&p, &topo, 10).unwrap().error_term;
        let e1 = theory::rate_bound(&noisier, &topo, 10).unwrap().error_term;
        prop_assert!(e1 >= e0);
        if p.sigma2 > 0.0 {
            prop_assert!(e1 > e0);
        }
    }

    #[test]
    fn tighter_condition_with_more_local_steps((fan, p) in small_params(), layer in 0usize..3) {
        let topo = Topology::uniform(&fan).unwrap();
        let layer = layer % fan.len();
        let mut longer = p.clone();
        longer.taus[layer] += 1.0;
        prop_assert!(theory::max_feasible_mu(&longer, &topo).unwrap() <= theory::max_feasible_mu(&p, &topo).unwrap());
    }
}

#[test]
fn single_local_step_without_noise_is_gradient_descent() {
    let topo = Topology::uniform(&[4, 3]).unwrap();
    let p = params(vec![0.0, 0.0], vec![1.0, 1.0]);
    // with every count 1 and exact uplinks the condition is 1 - L mu
    let lhs = theory::condition_lhs(&p, &topo).unwrap();
    assert!((lhs - (1.0 - p.lipschitz * p.mu)).abs() < 1e-15);
    let b = theory::rate_bound(&p, &topo, 50).unwrap();
    let expected = p.lipschitz * p.mu * p.sigma2 / 12.0;
    assert!((b.error_term - expected).abs() < 1e-15 * expected.max(1.0));
}

#[test]
fn specialized_forms_refuse_other_cases() {
    let three = Topology::uniform(&[2, 2, 2]).unwrap();
    let two = Topology::uniform(&[2, 2]).unwrap();
    let quantized = params(vec![0.1, 0.0], vec![2.0, 2.0]);
    assert!(matches!(
        theory::corollary1_condition(&quantized, &two),
        Err(TheoryError::WrongSpecialization(_))
    ));
    let three_layer = params(vec![0.0; 3], vec![2.0; 3]);
    assert!(matches!(
        theory::corollary2_condition(&three_layer, &three),
        Err(TheoryError::WrongSpecialization(_))
    ));
}

#[test]
fn shape_mismatches_are_reported() {
    let topo = Topology::uniform(&[2, 2]).unwrap();
    assert!(theory::rate_bound(&params(vec![0.0], vec![1.0, 1.0]), &topo, 5).is_err());
    assert!(theory::rate_bound(&params(vec![0.0; 2], vec![0.5, 1.0]), &topo, 5).is_err());
    assert!(theory::recursion_a(&params(vec![0.0; 2], vec![1.0; 2]), &topo, 2).is_err());
}
