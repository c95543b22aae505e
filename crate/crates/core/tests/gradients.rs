use proptest::prelude::*;
use rand::Rng;
use stepdpo::dpo::{
    alpha_weights, classic_dpo_gradient, dpo_loss, train_full_step_dpo, train_vanilla_dpo, DpoConfig, Side,
};
use stepdpo::env::{generate_suite, GeneratorConfig, OpKind, Problem, Solution};
use stepdpo::pairing::{PreferencePair, StepRewardTrace};
use stepdpo::policy::{FeatureMap, PolicyParams, ReferencePolicy};
use stepdpo::seed::stream_rng;

fn env(modulus: u32, depth: usize) -> GeneratorConfig {
    GeneratorConfig {
        modulus,
        depth,
        op_kinds: OpKind::ALL.to_vec(),
        max_operand: modulus - 1,
    }
}

fn random_policy(map: FeatureMap, seed: u64) -> PolicyParams {
    let mut rng = stream_rng(seed, "theta", 0);
    let mut params = PolicyParams::uniform(map);
    params.theta.iter_mut().for_each(|t| *t = rng.gen_range(-2.0..2.0));
    params
}

fn all_chains(map: &FeatureMap, p: &Problem, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    let Ok(state) = map.state(p, prefix) else {
        out.push(prefix.clone());
        return;
    };
    for v in map.candidates(&state) {
        prefix.push(v);
        all_chains(map, p, prefix, out);
        prefix.pop();
    }
}

#[test]
fn solution_probabilities_sum_to_one() {
    let map = FeatureMap::new(5, 3, 3);
    let policy = random_policy(map, 1);
    for p in generate_suite(1, "norm", 0, 10, &env(5, 3)).unwrap() {
        let mut chains = Vec::new();
        all_chains(&map, &p, &mut Vec::new(), &mut chains);
        assert_eq!(chains.len(), 27);
        let total: f64 = chains
            .into_iter()
            .map(|c| policy.solution_logprob(&p, &Solution::new(p.id, c)).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }
}

#[test]
fn exact_gradient_matches_finite_differences_at_every_entry() {
    let map = FeatureMap::new(7, 4, 4);
    let problems = generate_suite(2, "fd", 0, 10, &env(7, 4)).unwrap();
    let h = 1e-5;
    for (i, p) in problems.iter().enumerate() {
        let mut policy = random_policy(map, 10 + i as u64);
        let reference = random_policy(map, 100 + i as u64);
        let mut rng = stream_rng(3, "fd", i as u64);
        let mut trace = || StepRewardTrace::new(policy.sample_solution(p, 1.0, &mut rng), vec![0.5; 4]);
        let pair = PreferencePair {
            problem_id: p.id,
            preferred: trace(),
            dispreferred: trace(),
        };
        let g = classic_dpo_gradient(&policy, &reference, p, &pair, 0.3).unwrap();
        // every entry on either path, including ones the gradient leaves at zero
        let mut entries: Vec<usize> = Vec::new();
        for y in [&pair.preferred.solution, &pair.dispreferred.solution] {
            for k in 0..y.len() {
                for (_, e, _) in policy.candidate_logits(p, &y.steps[..k]).unwrap() {
                    entries.push(e);
                }
            }
        }
        for e in entries {
            let orig = policy.theta[e];
            policy.theta[e] = orig + h;
            let up = dpo_loss(&policy, &reference, p, &pair, 0.3).unwrap();
            policy.theta[e] = orig - h;
            let down = dpo_loss(&policy, &reference, p, &pair, 0.3).unwrap();
            policy.theta[e] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g.get(e)).abs() <= 1e-8 + 1e-5 * fd.abs(), "entry {e}: fd {fd} vs {}", g.get(e));
        }
    }
}

#[test]
fn zero_gamma_training_is_bitwise_vanilla() {
    let map = FeatureMap::new(7, 4, 4);
    let problems = generate_suite(4, "twin", 0, 40, &env(7, 4)).unwrap();
    let policy = random_policy(map, 4);
    let reference = ReferencePolicy::freeze(&policy);
    let mut rng = stream_rng(4, "twin", 0);
    let pairs: Vec<PreferencePair> = problems
        .iter()
        .flat_map(|p| {
            (0..3)
                .map(|_| {
                    let trace = |rng: &mut stepdpo::seed::StreamRng| {
                        let y = policy.sample_solution(p, 1.0, rng);
                        let r = (0..y.len()).map(|_| rng.gen()).collect();
                        StepRewardTrace::new(y, r)
                    };
                    PreferencePair {
                        problem_id: p.id,
                        preferred: trace(&mut rng),
                        dispreferred: trace(&mut rng),
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let cfg = DpoConfig {
        gamma: 0.0,
        learning_rate: 50.0,
        batch_size: 16,
        epochs: 2,
        ..DpoConfig::default()
    };
    let full = train_full_step_dpo(&policy, &reference, &problems, &pairs, &cfg).unwrap();
    let (vanilla, norms) = train_vanilla_dpo(
        &policy,
        &reference,
        &problems,
        &pairs,
        cfg.beta,
        cfg.learning_rate,
        cfg.batch_size,
        cfg.epochs,
    )
    .unwrap();
    assert_eq!(full.policy.theta.len(), vanilla.theta.len());
    for (a, b) in full.policy.theta.iter().zip(&vanilla.theta) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let full_norms: Vec<f64> = full.history.iter().map(|m| m.grad_norm).collect();
    assert_eq!(full_norms, norms);
    assert_ne!(full.policy.theta, policy.theta);
}

proptest! {
    #[test]
    fn alpha_weights_are_a_distribution(
        rewards in prop::collection::vec(0.0f64..1.0, 1..12),
        gamma in 0.0f64..20.0,
    ) {
        for side in [Side::Preferred, Side::Dispreferred] {
            let a = alpha_weights(&rewards, gamma, side).unwrap().weights;
            prop_assert_eq!(a.len(), rewards.len());
            prop_assert!(a.iter().all(|&w| w > 0.0 && w.is_finite()));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn alpha_orders_steps_by_reward(
        rewards in prop::collection::vec(0.0f64..1.0, 2..10),
        gamma in 0.01f64..20.0,
    ) {
        let w = alpha_weights(&rewards, gamma, Side::Preferred).unwrap().weights;
        let l = alpha_weights(&rewards, gamma, Side::Dispreferred).unwrap().weights;
        for i in 0..rewards.len() {
            for j in 0..rewards.len() {
                if rewards[i] > rewards[j] {
                    prop_assert!(w[i] >= w[j]);
                    prop_assert!(l[i] <= l[j]);
                }
            }
        }
    }

    #[test]
    fn step_distribution_normalizes(seed in 0u64..500, temperature in 0.05f64..5.0) {
        let map = FeatureMap::new(7, 4, 5);
        let policy = random_policy(map, seed);
        let p = &generate_suite(seed, "dist", 0, 1, &env(7, 4)).unwrap()[0];
        let dist = policy.step_distribution(p, &[], temperature).unwrap();
        prop_assert_eq!(dist.len(), 5);
        prop_assert!((dist.iter().map(|d| d.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
