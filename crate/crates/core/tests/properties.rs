use proptest::prelude::*;
use taypo_lab::mdp::{exact_q, perturbed_policy, random_mdp, Mdp, TabularPolicy};
use taypo_lab::offpolicy::{apply_return_operator, operator_expansion_gap, TraceCoefficients};
use taypo_lab::rng;
use taypo_lab::sampling::estimate_l2_mc;
use taypo_lab::taylor::{
    expansion_terms, expansion_terms_ratio_form, objective_term_expectation_form, objective_terms,
    residual, residual_operator_form, ValueBaseline,
};

fn triple(seed: u64, eps: f64, ns: usize, na: usize) -> (Mdp, TabularPolicy, TabularPolicy) {
    let mdp = random_mdp(ns, na, 1.0, seed).unwrap();
    let mu = TabularPolicy::random(ns, na, 1.0, &mut rng::seeded(seed ^ 0xABCD)).unwrap();
    let pi = perturbed_policy(&mu, eps, seed.wrapping_add(17)).unwrap();
    (mdp, pi, mu)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn matrix_and_ratio_forms_agree(seed in 0u64..10_000, eps in 0.0f64..0.6, ns in 2usize..7, na in 2usize..5) {
        let (mdp, pi, mu) = triple(seed, eps, ns, na);
        let a = expansion_terms(&mdp, &pi, &mu, 4).unwrap();
        let b = expansion_terms_ratio_form(&mdp, &pi, &mu, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.sub(y).norm_inf() < 1e-10);
        }
    }

    #[test]
    fn residual_forms_agree(seed in 0u64..10_000, eps in 0.0f64..0.6, k in 1usize..6) {
        let (mdp, pi, mu) = triple(seed, eps, 5, 3);
        let a = residual(&mdp, &pi, &mu, k).unwrap();
        let b = residual_operator_form(&mdp, &pi, &mu, k).unwrap();
        prop_assert!(a.sub(&b).norm_inf() < 1e-9);
    }

    #[test]
    fn operator_identity_ignores_radius(seed in 0u64..10_000, eps in 0.0f64..1.0, k in 1usize..7) {
        let (mdp, pi, mu) = triple(seed, eps, 5, 3);
        prop_assert!(operator_expansion_gap(&mdp, &pi, &mu, k).unwrap() < 1e-8);
    }

    #[test]
    fn expectation_form_matches_matrix_form(seed in 0u64..10_000, eps in 0.0f64..0.5, start in 0usize..5) {
        let (mdp, pi, mu) = triple(seed, eps, 5, 3);
        let exact = objective_terms(&mdp, &pi, &mu, start, 2).unwrap();
        for k in 1..=2 {
            for baseline in [ValueBaseline::QValues, ValueBaseline::Advantages] {
                let v = objective_term_expectation_form(&mdp, &pi, &mu, start, k, baseline).unwrap();
                prop_assert!((v - exact[k - 1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn true_q_is_fixed_under_every_trace(seed in 0u64..10_000, eps in 0.0f64..0.5, lambda in 0.0f64..=1.0) {
        let (mdp, pi, mu) = triple(seed, eps, 4, 3);
        let q = exact_q(&mdp, &pi).unwrap();
        for c in [TraceCoefficients::constant(lambda), TraceCoefficients::retrace(lambda), TraceCoefficients::vtrace(1.0)] {
            let out = apply_return_operator(&mdp, &q, &pi, &mu, &c).unwrap();
            prop_assert!(out.sub(&q).norm_inf() < 1e-9);
        }
    }
}

#[test]
fn estimates_do_not_depend_on_thread_count() {
    let (mdp, pi, mu) = triple(3, 0.2, 6, 3);
    let estimate = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            estimate_l2_mc(&mdp, &pi, &mu, 0, true, 50_000, 200, &mut rng::seeded(9)).unwrap()
        })
    };
    let one = estimate(1);
    let four = estimate(4);
    assert_eq!(one.mean.to_bits(), four.mean.to_bits());
    assert_eq!(one.standard_error.to_bits(), four.standard_error.to_bits());
    assert_eq!(one.discarded, four.discarded);
}
