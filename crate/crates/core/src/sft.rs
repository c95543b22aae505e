//! Supervised warm start from noisy demonstrations.
//!
//! A demonstrator walks each problem's chain and, at every step, writes the
//! correct value or a fixed per-state distractor (a "misconception"), then
//! keeps going from what it wrote. A seeded fraction of states is hard: there
//! the demonstrator is right only with probability `hard_correctness`, and the
//! easy states make up the difference so the mean is `correctness`.
//! The tabular policy is the smoothed maximum-likelihood fit of the
//! demonstrations: `theta = ln(count + smoothing)` over each state's
//! candidates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Problem, State};
use crate::policy::{FeatureMap, PolicyParams};
use crate::seed::{stream_rng, stream_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    /// Mean probability that a demonstrated step is correct.
    pub correctness: f64,
    /// Fraction of states with a dominant misconception.
    pub hard_fraction: f64,
    pub hard_correctness: f64,
    /// Demonstrations per problem.
    pub demos_per_problem: usize,
    /// Pseudo-count added to every candidate.
    pub smoothing: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            correctness: 0.8,
            hard_fraction: 0.15,
            hard_correctness: 0.3,
            demos_per_problem: 1,
            smoothing: 0.5,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.correctness) {
            return Err(format!("correctness {} outside [0, 1]", self.correctness));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) || !(0.0..=1.0).contains(&self.hard_correctness) {
            return Err("hard_fraction and hard_correctness must lie in [0, 1]".into());
        }
        let easy = self.easy_correctness();
        if !(0.0..=1.0).contains(&easy) {
            return Err(format!("mean correctness {} unreachable (easy states would need {easy})", self.correctness));
        }
        if !(self.smoothing > 0.0) {
            return Err("smoothing must be positive".into());
        }
        Ok(())
    }

    /// Correctness on the non-hard states.
    pub fn easy_correctness(&self) -> f64 {
        if self.hard_fraction >= 1.0 {
            return self.correctness;
        }
        (self.correctness - self.hard_fraction * self.hard_correctness) / (1.0 - self.hard_fraction)
    }

    /// Demonstrator correctness at `state`.
    pub fn correctness_at(&self, map: &FeatureMap, state: &State, seed: u64) -> f64 {
        let u = stream_seed(seed, "hard-state", map.feature(state) as u64) as f64 / u64::MAX as f64;
        if u < self.hard_fraction {
            self.hard_correctness
        } else {
            self.easy_correctness()
        }
    }
}

/// The wrong candidate the demonstrator writes at `state`. Depends only on
/// the state and `seed`.
pub fn misconception(map: &FeatureMap, state: &State, seed: u64) -> Option<u32> {
    let truth = state.true_next();
    let wrong: Vec<u32> = map.candidates(state).into_iter().filter(|&v| v != truth).collect();
    if wrong.is_empty() {
        return None;
    }
    let pick = stream_seed(seed, "misconception", map.feature(state) as u64) % wrong.len() as u64;
    Some(wrong[pick as usize])
}

/// One demonstrated chain for `p`.
pub fn demonstrate<R: Rng + ?Sized>(
    map: &FeatureMap,
    p: &Problem,
    cfg: &SftConfig,
    seed: u64,
    rng: &mut R,
) -> Vec<u32> {
    let mut steps = Vec::with_capacity(p.depth());
    while let Some(state) = p.state_after(&steps) {
        let slip = rng.gen::<f64>() >= cfg.correctness_at(map, &state, seed);
        let value = match misconception(map, &state, seed) {
            Some(d) if slip => d,
            _ => state.true_next(),
        };
        steps.push(value);
    }
    steps
}

/// Fit the policy to demonstrations on `problems`.
pub fn sft_init(map: FeatureMap, problems: &[Problem], cfg: &SftConfig, seed: u64) -> Result<PolicyParams, String> {
    cfg.validate()?;
    let mut counts = vec![0.0f64; map.num_entries()];
    for (i, p) in problems.iter().enumerate() {
        let mut rng = stream_rng(seed, "sft-demo", i as u64);
        for _ in 0..cfg.demos_per_problem {
            let demo = demonstrate(&map, p, cfg, seed, &mut rng);
            for k in 0..demo.len() {
                let state = map.state(p, &demo[..k]).map_err(|e| e.to_string())?;
                counts[map.entry(map.feature(&state), demo[k])] += 1.0;
            }
        }
    }
    let theta = counts.iter().map(|c| (c + cfg.smoothing).ln()).collect();
    Ok(PolicyParams { map, theta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_suite, GeneratorConfig};

    #[test]
    fn demonstrations_follow_correctness() {
        let env = GeneratorConfig::default();
        let map = FeatureMap::new(7, 4, 4);
        let problems = generate_suite(1, "sft", 0, 2000, &env).unwrap();
        let cfg = SftConfig::default();
        let mut right = 0usize;
        let mut total = 0usize;
        for (i, p) in problems.iter().enumerate() {
            let demo = demonstrate(&map, p, &cfg, 9, &mut stream_rng(9, "t", i as u64));
            for k in 0..demo.len() {
                let s = p.state_after(&demo[..k]).unwrap();
                let v = demo[k];
                assert!(map.candidates(&s).contains(&v));
                if v == s.true_next() {
                    right += 1;
                } else {
                    assert_eq!(Some(v), misconception(&map, &s, 9));
                }
                total += 1;
            }
        }
        let rate = right as f64 / total as f64;
        // 8000 steps; the hard-state draw adds spread on top of the
        // Bernoulli noise
        assert!((rate - 0.8).abs() < 0.04, "{rate}");
    }

    #[test]
    fn perfect_demonstrator_gives_correct_greedy() {
        let env = GeneratorConfig::default();
        let map = FeatureMap::new(7, 4, 4);
        let problems = generate_suite(2, "sft", 0, 300, &env).unwrap();
        let cfg = SftConfig {
            correctness: 1.0,
            hard_fraction: 0.0,
            ..SftConfig::default()
        };
        let policy = sft_init(map, &problems, &cfg, 3).unwrap();
        for p in &problems {
            assert_eq!(policy.greedy_decode(p).steps, p.gold_trace());
        }
    }

    #[test]
    fn fit_is_smoothed_counts() {
        let env = GeneratorConfig::default();
        let map = FeatureMap::new(7, 4, 4);
        let problems = generate_suite(3, "sft", 0, 1, &env).unwrap();
        let cfg = SftConfig {
            correctness: 1.0,
            hard_fraction: 0.0,
            hard_correctness: 0.0,
            demos_per_problem: 3,
            smoothing: 0.5,
        };
        let policy = sft_init(map, &problems, &cfg, 0).unwrap();
        let p = &problems[0];
        let dist = policy.step_distribution(p, &[], 1.0).unwrap();
        let truth = p.state_after(&[]).unwrap().true_next();
        for (v, prob) in dist {
            let want = if v == truth { 3.5 / 5.0 } else { 0.5 / 5.0 };
            assert!((prob - want).abs() < 1e-12);
        }
    }

    #[test]
    fn easy_states_balance_the_mean() {
        let cfg = SftConfig::default();
        let mean = cfg.hard_fraction * cfg.hard_correctness + (1.0 - cfg.hard_fraction) * cfg.easy_correctness();
        assert!((mean - cfg.correctness).abs() < 1e-12);
        let map = FeatureMap::new(7, 4, 4);
        let problems = generate_suite(4, "sft", 0, 500, &GeneratorConfig::default()).unwrap();
        let hard = problems
            .iter()
            .filter(|p| cfg.correctness_at(&map, &p.state_after(&[]).unwrap(), 1) == cfg.hard_correctness)
            .count();
        assert!((40..=110).contains(&hard), "{hard}");
    }

    #[test]
    fn rejects_bad_config() {
        let bad = SftConfig {
            correctness: 1.5,
            ..SftConfig::default()
        };
        assert!(bad.validate().is_err());
        let unreachable = SftConfig {
            correctness: 0.95,
            hard_fraction: 0.5,
            hard_correctness: 0.0,
            ..SftConfig::default()
        };
        assert!(unreachable.validate().is_err());
    }
}
