use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// One input, two concepts with the given label rows.
fn one_input_model(prior: [f64; 2], rows: [[f64; 2]; 2]) -> ConceptModel {
    ConceptModel::new(prior.to_vec(), vec![vec![1.0], vec![1.0]], vec![vec![rows[0].to_vec()], vec![rows[1].to_vec()]])
        .unwrap()
}

fn random_row(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 1e-3).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

fn random_model(rng: &mut impl Rng, max_z: usize, max_e: usize, max_c: usize) -> ConceptModel {
    let zs = rng.random_range(2..=max_z);
    let es = rng.random_range(1..=max_e);
    let cs = rng.random_range(2..=max_c);
    ConceptModel::new(
        random_row(zs, rng),
        (0..zs).map(|_| random_row(es, rng)).collect(),
        (0..zs).map(|_| (0..es).map(|_| random_row(cs, rng)).collect()).collect(),
    )
    .unwrap()
}

fn random_obs(model: &ConceptModel, rng: &mut impl Rng) -> Observation {
    Observation::new(rng.random_range(0..model.num_inputs()), rng.random_range(0..model.num_classes()))
}

#[test]
fn bayes_rule_hand_example() {
    let model = one_input_model([0.5, 0.5], [[0.8, 0.2], [0.2, 0.8]]);
    let post = posterior_update(&BeliefState::prior(&model), Observation::new(0, 0), &model).unwrap();
    assert!((post.posterior()[0] - 0.8).abs() < 1e-15);
    assert!((post.posterior()[1] - 0.2).abs() < 1e-15);
}

#[test]
fn uninformative_evidence_leaves_belief() {
    let model = one_input_model([0.3, 0.7], [[0.6, 0.4], [0.6, 0.4]]);
    let belief = BeliefState::prior(&model);
    let post = posterior_update(&belief, Observation::new(0, 1), &model).unwrap();
    for (a, b) in post.posterior().iter().zip(belief.posterior()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn certainty_is_absorbing() {
    let model = one_input_model([1.0, 0.0], [[0.3, 0.7], [0.9, 0.1]]);
    let post = posterior_update(&BeliefState::prior(&model), Observation::new(0, 0), &model).unwrap();
    assert_eq!(post.posterior(), &[1.0, 0.0]);
}

#[test]
fn zero_evidence_is_an_error() {
    let model = one_input_model([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]);
    assert!(matches!(
        posterior_update(&BeliefState::prior(&model), Observation::new(0, 1), &model),
        Err(Error::ZeroEvidence)
    ));
}

#[test]
fn class_prior_examples() {
    let model = one_input_model([0.8, 0.2], [[0.9, 0.1], [0.1, 0.9]]);
    let prior = class_prior(&BeliefState::prior(&model), &model).unwrap();
    assert!((prior.prob(0) - 0.74).abs() < 1e-12);

    let shared = one_input_model([0.1, 0.9], [[0.3, 0.7], [0.3, 0.7]]);
    let prior = class_prior(&BeliefState::prior(&shared), &shared).unwrap();
    assert!((prior.prob(1) - 0.7).abs() < 1e-12);

    let uniform = one_input_model([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]]);
    assert_eq!(class_prior(&BeliefState::prior(&uniform), &uniform).unwrap().probs(), &[0.5, 0.5]);
}

#[test]
fn predictive_examples() {
    let single = ConceptModel::new(vec![1.0], vec![vec![0.5, 0.5]], vec![vec![vec![0.25, 0.75], vec![0.5, 0.5]]]).unwrap();
    let belief = BeliefState::prior(&single);
    assert_eq!(predictive_prob(&belief, 0, &single).unwrap().probs(), &[0.25, 0.75]);

    let sym = one_input_model([0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]]);
    let d = predictive_prob(&BeliefState::prior(&sym), 0, &sym).unwrap();
    assert!((d.prob(0) - 0.5).abs() < 1e-15);

    let mix = one_input_model([0.8, 0.2], [[1.0, 0.0], [0.0, 1.0]]);
    let d = predictive_prob(&BeliefState::prior(&mix), 0, &mix).unwrap();
    assert!((d.prob(0) - 0.8).abs() < 1e-15 && (d.prob(1) - 0.2).abs() < 1e-15);
}

#[test]
fn decomposition_arithmetic_example() {
    let terms = decompose_terms(&[0.5, 0.5], &[0.9, 0.1], &[0.8, 0.2]);
    assert!((terms.expectation_term - 0.5).abs() < 1e-15);
    // Cov = E[m l] - E[m] E[l] = 0.37 - 0.25
    assert!((terms.covariance_term - 0.24).abs() < 1e-15);
    assert!((terms.direct_updated_prior - 0.74).abs() < 1e-15);
}

#[test]
fn decomposition_zero_covariance_cases() {
    let model = one_input_model([0.4, 0.6], [[0.7, 0.3], [0.7, 0.3]]);
    let d = decompose_prior_update(&BeliefState::prior(&model), Observation::new(0, 0), 1, &model).unwrap();
    assert!(d.covariance_term.abs() < 1e-15);
    assert!((d.direct_updated_prior - d.expectation_term).abs() < 1e-15);

    // label marginals differ, likelihood of the observation does not
    let two_inputs = ConceptModel::new(
        vec![0.5, 0.5],
        vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        vec![vec![vec![0.5, 0.5], vec![0.9, 0.1]], vec![vec![0.5, 0.5], vec![0.1, 0.9]]],
    )
    .unwrap();
    let d = decompose_prior_update(&BeliefState::prior(&two_inputs), Observation::new(0, 1), 0, &two_inputs).unwrap();
    assert!(d.covariance_term.abs() < 1e-15);
}

#[test]
fn decomposition_identity_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let model = random_model(&mut rng, 50, 20, 4);
        let belief = BeliefState::from_posterior(random_row(model.num_concepts(), &mut rng)).unwrap();
        let obs = random_obs(&model, &mut rng);
        let target = rng.random_range(0..model.num_classes());
        let d = decompose_prior_update(&belief, obs, target, &model).unwrap();
        let lhs = d.expectation_term + d.covariance_term;
        assert!((lhs - d.direct_updated_prior).abs() <= 1e-9 * d.direct_updated_prior.abs().max(1e-300));
    }
}

/// Explicit enumeration in the same arithmetic order.
fn brute_predictive(belief: &BeliefState, e: usize, model: &ConceptModel) -> Vec<f64> {
    let mut out = vec![0.0; model.num_classes()];
    for z in 0..model.num_concepts() {
        for (y, o) in out.iter_mut().enumerate() {
            *o += belief.posterior()[z] * model.label_row(z, e)[y];
        }
    }
    normalize_over_labels(&out).unwrap().into_vec()
}

/// Log-space reimplementation: log-sum-exp over concepts of ln w + ln p.
fn log_space_predictive(belief: &BeliefState, e: usize, model: &ConceptModel) -> Vec<f64> {
    let logs: Vec<f64> = (0..model.num_classes())
        .map(|y| {
            let terms: Vec<f64> =
                (0..model.num_concepts()).map(|z| belief.posterior()[z].ln() + model.label_row(z, e)[y].ln()).collect();
            let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    logs.iter().map(|l| (l - max).exp() / z).collect()
}

#[test]
fn predictive_matches_enumeration_and_log_space() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let model = random_model(&mut rng, 50, 20, 4);
        let demos: Vec<Observation> = (0..3).map(|_| random_obs(&model, &mut rng)).collect();
        let belief = BeliefState::after(&model, &demos).unwrap();
        let e = rng.random_range(0..model.num_inputs());
        let got = predictive_prob(&belief, e, &model).unwrap();
        assert_eq!(got.probs(), brute_predictive(&belief, e, &model).as_slice());
        for (a, b) in got.probs().iter().zip(log_space_predictive(&belief, e, &model)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn exact_posterior_is_exchangeable() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let model = random_model(&mut rng, 20, 10, 3);
        let demos: Vec<Observation> = (0..5).map(|_| random_obs(&model, &mut rng)).collect();
        let mut reversed = demos.clone();
        reversed.reverse();
        let a = BeliefState::after(&model, &demos).unwrap();
        let b = BeliefState::after(&model, &reversed).unwrap();
        for (x, y) in a.posterior().iter().zip(b.posterior()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn surprise_values() {
    let certain = one_input_model([0.5, 0.5], [[1.0, 0.0], [1.0, 0.0]]);
    assert_eq!(surprise_of(&BeliefState::prior(&certain), Observation::new(0, 0), &certain).unwrap(), 0.0);

    let half = one_input_model([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]]);
    let s = surprise_of(&BeliefState::prior(&half), Observation::new(0, 1), &half).unwrap();
    assert!((s - std::f64::consts::LN_2).abs() < 1e-15);

    let p = (-3.0f64).exp();
    let model = one_input_model([0.5, 0.5], [[p, 1.0 - p], [p, 1.0 - p]]);
    let s = surprise_of(&BeliefState::prior(&model), Observation::new(0, 0), &model).unwrap();
    assert!((s - 3.0).abs() < 1e-12);
}

#[test]
fn surprise_is_nonnegative_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let model = random_model(&mut rng, 10, 6, 4);
        let obs = random_obs(&model, &mut rng);
        assert!(surprise_of(&BeliefState::prior(&model), obs, &model).unwrap() >= 0.0);
    }
}

#[test]
fn generator_is_deterministic() {
    let cfg = SyntheticTaskConfig { seed: 42, ..SyntheticTaskConfig::default() };
    let a = serde_json::to_string(&generate_task(&cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&generate_task(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    let other = serde_json::to_string(&generate_task(&SyntheticTaskConfig { seed: 43, ..cfg }).unwrap()).unwrap();
    assert_ne!(a, other);
}

#[test]
fn generator_limits() {
    let flat = SyntheticTaskConfig { concentration: 1e6, bias_strength: 0.0, ..SyntheticTaskConfig::default() };
    let model = generate_task(&flat).unwrap();
    for z in 0..model.num_concepts() {
        for e in 0..model.num_inputs() {
            for &p in model.label_row(z, e) {
                assert!((p - 0.5).abs() < 0.01);
            }
        }
    }

    let skewed = SyntheticTaskConfig { num_classes: 3, bias_strength: 1.0, ..SyntheticTaskConfig::default() };
    let world = generate_world(&skewed).unwrap();
    for z in 0..world.model.num_concepts() {
        let marginal = world.model.concept_label_marginal(z);
        assert_eq!(crate::domain::argmax(&marginal), world.favored[z]);
    }
}

#[test]
fn model_json_round_trip_validates() {
    let model = generate_task(&SyntheticTaskConfig::default()).unwrap();
    let json = serde_json::to_string(&model).unwrap();
    let back: ConceptModel = serde_json::from_str(&json).unwrap();
    assert_eq!(back, model);
    let broken = json.replacen("\"concept_prior\":[0.125", "\"concept_prior\":[0.5", 1);
    assert!(serde_json::from_str::<ConceptModel>(&broken).is_err());
}

#[test]
fn simulate_episode_cases() {
    let model = generate_task(&SyntheticTaskConfig::default()).unwrap();
    let zero = simulate_episode(&model, &[], 3).unwrap();
    assert_eq!(zero.query_dist, predictive_prob(&BeliefState::prior(&model), 3, &model).unwrap());

    let demos = [Observation::new(1, 0), Observation::new(4, 1), Observation::new(7, 1)];
    let swapped = [demos[2], demos[0], demos[1]];
    let a = simulate_episode(&model, &demos, 5).unwrap();
    let b = simulate_episode(&model, &swapped, 5).unwrap();
    for (x, y) in a.query_dist.probs().iter().zip(b.query_dist.probs()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_eq!(a.demo_dists.len(), 3);
    assert_eq!(a.demos[1].text, "x4");

    let single = ConceptModel::new(vec![1.0], vec![vec![0.5, 0.5]], vec![vec![vec![0.25, 0.75], vec![0.5, 0.5]]]).unwrap();
    let ep = simulate_episode(&single, &[Observation::new(1, 0)], 0).unwrap();
    assert_eq!(ep.demo_dists[0].probs(), &[0.5, 0.5]);
    assert_eq!(ep.query_dist.probs(), &[0.25, 0.75]);
}

#[test]
fn insertion_sign_rule() {
    let half = one_input_model([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]]);
    let records = insertion_experiment(&half, &[], &[Observation::new(0, 1), Observation::new(0, 0)]).unwrap();
    assert!((records[0].signed_surprise - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((records[1].signed_surprise + std::f64::consts::LN_2).abs() < 1e-15);

    let certain = one_input_model([0.5, 0.5], [[0.0, 1.0], [0.0, 1.0]]);
    let records = insertion_experiment(&certain, &[], &[Observation::new(0, 1)]).unwrap();
    assert_eq!(records[0].signed_surprise, 0.0);

    let three = generate_task(&SyntheticTaskConfig { num_classes: 3, ..SyntheticTaskConfig::default() }).unwrap();
    assert!(insertion_experiment(&three, &[], &[Observation::new(0, 0)]).is_err());
}
