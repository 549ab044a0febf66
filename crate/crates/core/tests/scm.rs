use approx::assert_abs_diff_eq;
use dir_learn_core::scm::{verify, DiscreteScm};
use dir_learn_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|x| x / s).collect();
    let residue = 1.0 - row.iter().sum::<f64>();
    row[0] += residue;
    row
}

#[test]
fn confounded_example_values() {
    let scm = DiscreteScm::confounded_example();
    let obs = scm.observational(1).unwrap();
    let int = scm.interventional(1).unwrap();
    let bd = scm.backdoor_formula(1).unwrap();
    assert_abs_diff_eq!(obs[1], 0.74, epsilon = 1e-12);
    assert_abs_diff_eq!(int[1], 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(bd[1], 0.5, epsilon = 1e-12);
    assert!(obs[1] > int[1]);
    for row in [&obs, &int, &bd] {
        assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}

#[test]
fn independent_mechanism_has_no_confounding() {
    let scm = DiscreteScm::new(
        vec![0.3, 0.7],
        vec![vec![0.4, 0.6], vec![0.4, 0.6]],
        vec![
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![vec![0.5, 0.5], vec![0.1, 0.9]],
        ],
    )
    .unwrap();
    assert!(scm.s_independent_of_v(0.0));
    for s in 0..2 {
        let obs = scm.observational(s).unwrap();
        assert!(max_gap(&obs, &scm.interventional(s).unwrap()) < 1e-12);
        assert!(max_gap(&obs, &scm.backdoor_formula(s).unwrap()) < 1e-12);
    }
}

#[test]
fn point_mass_confounder_reduces_to_its_conditional() {
    let scm = DiscreteScm::new(
        vec![1.0, 0.0],
        vec![vec![0.5, 0.5], vec![0.2, 0.8]],
        vec![
            vec![vec![0.3, 0.7], vec![0.6, 0.4]],
            vec![vec![0.9, 0.1], vec![0.25, 0.75]],
        ],
    )
    .unwrap();
    for s in 0..2 {
        assert_eq!(scm.interventional(s).unwrap(), scm.p_y_given_sv[s][0]);
    }
}

#[test]
fn zero_probability_conditioning_is_an_error() {
    let scm = DiscreteScm::new(
        vec![0.5, 0.5],
        vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        vec![vec![vec![1.0], vec![1.0]], vec![vec![1.0], vec![1.0]]],
    )
    .unwrap();
    assert!(matches!(scm.observational(1), Err(Error::UndefinedConditional(_))));
    assert_eq!(scm.interventional(1).unwrap(), vec![1.0]);
    let report = verify(&scm, 1e-12).unwrap();
    assert!(report.rows[1].observational.is_none());
    assert!(report.pass);
}

#[test]
fn backdoor_equals_intervention_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let scm = DiscreteScm::random(&mut rng, 4);
        scm.validate().unwrap();
        let report = verify(&scm, 1e-12).unwrap();
        assert!(report.pass, "gap {}", report.max_backdoor_gap);
    }
}

#[test]
fn json_roundtrip_and_unknown_fields() {
    let scm = DiscreteScm::confounded_example();
    let text = serde_json::to_string(&scm).unwrap();
    assert_eq!(DiscreteScm::from_json(&text).unwrap(), scm);
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["extra"] = serde_json::json!(1);
    assert!(DiscreteScm::from_json(&doc.to_string()).is_err());
    doc.as_object_mut().unwrap().remove("extra");
    doc["p_v"] = serde_json::json!([0.5, 0.6]);
    assert!(matches!(DiscreteScm::from_json(&doc.to_string()), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn all_outputs_are_distributions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scm = DiscreteScm::random(&mut rng, 4);
        for s in 0..scm.n_s() {
            for row in [scm.interventional(s).unwrap(), scm.backdoor_formula(s).unwrap()] {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            if let Ok(row) = scm.observational(s) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn observational_matches_intervention_iff_independent(seed in any::<u64>(), ns in 2usize..5, ny in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p_v = simplex(&mut rng, 2);
        let y_tables: Vec<Vec<Vec<f64>>> = (0..ns)
            .map(|_| {
                let a = simplex(&mut rng, ny);
                let mut shifted = a.clone();
                shifted.rotate_left(1);
                let b = shifted.iter().zip(&a).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
                vec![a, b]
            })
            .collect();
        prop_assume!(y_tables.iter().all(|t| max_gap(&t[0], &t[1]) > 1e-6));

        let shared = simplex(&mut rng, ns);
        let independent = DiscreteScm::new(p_v.clone(), vec![shared.clone(), shared.clone()], y_tables.clone()).unwrap();
        for s in 0..ns {
            prop_assert!(max_gap(&independent.observational(s).unwrap(), &independent.interventional(s).unwrap()) < 1e-12);
        }

        let other = simplex(&mut rng, ns);
        prop_assume!(shared.iter().zip(&other).all(|(a, b)| (a - b).abs() > 1e-3));
        let confounded = DiscreteScm::new(p_v, vec![shared, other], y_tables).unwrap();
        prop_assert!(!confounded.s_independent_of_v(0.0));
        for s in 0..ns {
            prop_assert!(max_gap(&confounded.observational(s).unwrap(), &confounded.interventional(s).unwrap()) > 1e-9);
        }
    }
}
