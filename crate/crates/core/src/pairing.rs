//! Preference pairs with step-reward traces.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{check_answer, Problem, Solution};
use crate::math::mean;
use crate::policy::PolicyParams;
use crate::prm::{score_steps, PrmError, PrmParams, SamplingBudget};

/// A solution with its per-step PRM rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRewardTrace {
    pub solution: Solution,
    pub rewards: Vec<f64>,
    pub mean_reward: f64,
}

impl StepRewardTrace {
    pub fn new(solution: Solution, rewards: Vec<f64>) -> Self {
        let mean_reward = mean(&rewards);
        StepRewardTrace {
            solution,
            rewards,
            mean_reward,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub problem_id: u64,
    /// Correct solution.
    pub preferred: StepRewardTrace,
    /// Incorrect solution.
    pub dispreferred: StepRewardTrace,
}

/// Line format: `{"problem_id", "w": {"steps", "rewards"}, "l": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub problem_id: u64,
    pub w: TraceRecord,
    pub l: TraceRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub steps: Vec<u32>,
    pub rewards: Vec<f64>,
}

impl From<&PreferencePair> for PairRecord {
    fn from(pair: &PreferencePair) -> Self {
        let rec = |t: &StepRewardTrace| TraceRecord {
            steps: t.solution.steps.clone(),
            rewards: t.rewards.clone(),
        };
        PairRecord {
            problem_id: pair.problem_id,
            w: rec(&pair.preferred),
            l: rec(&pair.dispreferred),
        }
    }
}

impl From<PairRecord> for PreferencePair {
    fn from(r: PairRecord) -> Self {
        let trace = |t: TraceRecord| StepRewardTrace::new(Solution::new(r.problem_id, t.steps), t.rewards);
        PreferencePair {
            problem_id: r.problem_id,
            preferred: trace(r.w),
            dispreferred: trace(r.l),
        }
    }
}

pub fn score_solution(prm: &PrmParams, p: &Problem, y: &Solution) -> Result<StepRewardTrace, PrmError> {
    Ok(StepRewardTrace::new(y.clone(), score_steps(prm, p, y)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    /// Every selected preferred trace against every selected dispreferred one.
    #[default]
    CrossProduct,
    /// The cross product in random order, truncated to `T^2`.
    RandomSubset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingConfig {
    pub temperature: f64,
    pub mode: PairingMode,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            temperature: 0.8,
            mode: PairingMode::CrossProduct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipReason {
    NoCorrect,
    NoIncorrect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBuild {
    pub pairs: Vec<PreferencePair>,
    pub num_correct: usize,
    pub num_incorrect: usize,
    /// Set when one side was empty and the problem produced no pairs.
    pub skipped: Option<SkipReason>,
}

struct Ranked {
    trace: StepRewardTrace,
    logprob: f64,
    order: usize,
}

/// Sample `M` solutions at the pairing temperature and pair them with
/// [`pair_solutions`].
pub fn build_pairs<R: Rng + ?Sized>(
    policy: &PolicyParams,
    prm: &PrmParams,
    p: &Problem,
    budget: &SamplingBudget,
    cfg: &PairingConfig,
    rng: &mut R,
) -> Result<PairBuild, PrmError> {
    budget.validate()?;
    let samples: Vec<Solution> = (0..budget.m)
        .map(|_| policy.sample_solution(p, cfg.temperature, rng))
        .collect();
    pair_solutions(policy, prm, p, &samples, budget.t, cfg.mode, rng)
}

/// Keep distinct solutions, rank each class by mean reward and pair the top
/// `t` correct with the bottom `t` incorrect.
///
/// Ties in mean reward go to the higher policy log-probability, then to the
/// earlier sample.
pub fn pair_solutions<R: Rng + ?Sized>(
    policy: &PolicyParams,
    prm: &PrmParams,
    p: &Problem,
    samples: &[Solution],
    t: usize,
    mode: PairingMode,
    rng: &mut R,
) -> Result<PairBuild, PrmError> {
    let mut seen = HashSet::new();
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for y in samples {
        if !seen.insert(y.steps.clone()) {
            continue;
        }
        let ranked = Ranked {
            logprob: policy.solution_logprob(p, y)?,
            trace: score_solution(prm, p, y)?,
            order: seen.len(),
        };
        if check_answer(y, p)? {
            correct.push(ranked);
        } else {
            incorrect.push(ranked);
        }
    }
    let (num_correct, num_incorrect) = (correct.len(), incorrect.len());
    let skipped = match (num_correct, num_incorrect) {
        (0, _) => Some(SkipReason::NoCorrect),
        (_, 0) => Some(SkipReason::NoIncorrect),
        _ => None,
    };
    if skipped.is_some() {
        return Ok(PairBuild {
            pairs: Vec::new(),
            num_correct,
            num_incorrect,
            skipped,
        });
    }

    let tie_break = |a: &Ranked, b: &Ranked| {
        b.logprob
            .partial_cmp(&a.logprob)
            .unwrap_or(Ordering::Equal)
            .then(a.order.cmp(&b.order))
    };
    correct.sort_by(|a, b| {
        b.trace
            .mean_reward
            .partial_cmp(&a.trace.mean_reward)
            .unwrap_or(Ordering::Equal)
            .then_with(|| tie_break(a, b))
    });
    incorrect.sort_by(|a, b| {
        a.trace
            .mean_reward
            .partial_cmp(&b.trace.mean_reward)
            .unwrap_or(Ordering::Equal)
            .then_with(|| tie_break(a, b))
    });
    correct.truncate(t);
    incorrect.truncate(t);

    let mut pairs: Vec<PreferencePair> = correct
        .iter()
        .flat_map(|w| {
            incorrect.iter().map(move |l| PreferencePair {
                problem_id: p.id,
                preferred: w.trace.clone(),
                dispreferred: l.trace.clone(),
            })
        })
        .collect();
    if mode == PairingMode::RandomSubset {
        pairs.shuffle(rng);
        pairs.truncate(t * t);
    }
    Ok(PairBuild {
        pairs,
        num_correct,
        num_incorrect,
        skipped: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Op, OpKind};
    use crate::policy::FeatureMap;
    use crate::seed::stream_rng;

    fn problem() -> Problem {
        Problem {
            id: 5,
            start_value: 2,
            ops: vec![Op::new(OpKind::Add, 1), Op::new(OpKind::Mul, 2)],
            modulus: 7,
        }
    }

    fn map() -> FeatureMap {
        FeatureMap::new(7, 2, 3)
    }

    /// Policy with `p_correct` on the true value at the start state and on
    /// every next state reachable from the start candidates.
    fn biased_policy(logit: f64) -> PolicyParams {
        let p = problem();
        let mut params = PolicyParams::uniform(map());
        let first = params.candidate_logits(&p, &[]).unwrap();
        let truth = p.gold_trace();
        for c in &first {
            if c.0 == truth[0] {
                params.theta[c.1] = logit;
            }
            let next = params.candidate_logits(&p, &[c.0]).unwrap();
            let t = p.state_after(&[c.0]).unwrap().true_next();
            for n in next {
                if n.0 == t {
                    params.theta[n.1] = logit;
                }
            }
        }
        params
    }

    #[test]
    fn zero_prm_scores_half() {
        let p = problem();
        let prm = PrmParams::zeros(map());
        let t = score_solution(&prm, &p, &Solution::new(5, vec![3, 6])).unwrap();
        assert_eq!(t.rewards, vec![0.5, 0.5]);
        assert_eq!(t.mean_reward, 0.5);
        let one = StepRewardTrace::new(Solution::new(5, vec![3]), vec![0.3]);
        assert_eq!(one.mean_reward, 0.3);
    }

    #[test]
    fn mean_survives_serialization() {
        let trace = StepRewardTrace::new(Solution::new(5, vec![3, 6]), vec![0.12345, 0.9876]);
        let pair = PreferencePair {
            problem_id: 5,
            preferred: trace.clone(),
            dispreferred: trace,
        };
        let json = serde_json::to_string(&PairRecord::from(&pair)).unwrap();
        let back: PreferencePair = serde_json::from_str::<PairRecord>(&json).unwrap().into();
        let direct = (0.12345 + 0.9876) / 2.0;
        assert!((back.preferred.mean_reward - direct).abs() < 1e-12);
        assert_eq!(back, pair);
    }

    #[test]
    fn all_correct_is_skipped() {
        let p = problem();
        let policy = biased_policy(60.0);
        let out = build_pairs(
            &policy,
            &PrmParams::zeros(map()),
            &p,
            &SamplingBudget { m: 32, n: 0, t: 4 },
            &PairingConfig::default(),
            &mut stream_rng(1, "pairs", 0),
        )
        .unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(out.skipped, Some(SkipReason::NoIncorrect));
        assert_eq!(out.num_correct, 1);
    }

    #[test]
    fn pairs_respect_classes_ranking_and_count() {
        let p = problem();
        let policy = biased_policy(0.7);
        // PRM favouring step value 3 at the first state
        let mut prm = PrmParams::zeros(map());
        for v in 0..7 {
            let e = prm.entry(&p, &[], v).unwrap();
            prm.theta[e] = if v == 3 { 1.0 } else { -0.5 + 0.1 * f64::from(v) };
        }
        for seed in 0..20 {
            let budget = SamplingBudget { m: 32, n: 0, t: 4 };
            let out = build_pairs(
                &policy,
                &prm,
                &p,
                &budget,
                &PairingConfig::default(),
                &mut stream_rng(seed, "pairs", 0),
            )
            .unwrap();
            let expect = out.num_correct.min(4) * out.num_incorrect.min(4);
            assert_eq!(out.pairs.len(), expect);
            assert!(out.pairs.len() <= 16);
            for pair in &out.pairs {
                assert!(check_answer(&pair.preferred.solution, &p).unwrap());
                assert!(!check_answer(&pair.dispreferred.solution, &p).unwrap());
            }
            let again = build_pairs(
                &policy,
                &prm,
                &p,
                &budget,
                &PairingConfig::default(),
                &mut stream_rng(seed, "pairs", 0),
            )
            .unwrap();
            assert_eq!(again, out);
        }
    }

    #[test]
    fn clamped_cross_product_and_selection_order() {
        let p = problem();
        // gold trace is [3, 6]; full branching so compensated chains are valid
        let map = FeatureMap::new(7, 2, 7);
        let correct = [vec![3, 6], vec![2, 6], vec![4, 6]];
        let incorrect = [vec![3, 5], vec![3, 0], vec![2, 5]];
        let samples: Vec<Solution> = correct
            .iter()
            .chain(&incorrect)
            .chain(std::iter::once(&vec![3, 6]))
            .map(|s| Solution::new(5, s.clone()))
            .collect();
        let mut prm = PrmParams::zeros(map);
        for (prefix, step, z) in [(vec![], 2, 1.0), (vec![], 4, -1.0), (vec![3], 0, -2.0)] {
            let e = prm.entry(&p, &prefix, step).unwrap();
            prm.theta[e] = z;
        }
        let policy = PolicyParams::uniform(map);
        let mut rng = stream_rng(0, "unused", 0);

        let all = pair_solutions(&policy, &prm, &p, &samples, 4, PairingMode::CrossProduct, &mut rng)
            .unwrap();
        assert_eq!((all.num_correct, all.num_incorrect), (3, 3));
        assert_eq!(all.pairs.len(), 9);

        // two correct, three incorrect
        let two = pair_solutions(&policy, &prm, &p, &samples[1..6], 4, PairingMode::CrossProduct, &mut rng)
            .unwrap();
        assert_eq!((two.num_correct, two.num_incorrect), (2, 3));
        assert_eq!(two.pairs.len(), 2 * 3);

        let top = pair_solutions(&policy, &prm, &p, &samples, 2, PairingMode::CrossProduct, &mut rng)
            .unwrap();
        assert_eq!(top.pairs.len(), 4);
        let w: Vec<_> = top.pairs.iter().map(|x| x.preferred.solution.steps.clone()).collect();
        let l: Vec<_> = top.pairs.iter().map(|x| x.dispreferred.solution.steps.clone()).collect();
        // correct by mean reward: [2,6] > [3,6] > [4,6]
        assert_eq!(w, vec![vec![2, 6], vec![2, 6], vec![3, 6], vec![3, 6]]);
        // incorrect ascending: [3,0] < [3,5] < [2,5]
        assert_eq!(l, vec![vec![3, 0], vec![3, 5], vec![3, 0], vec![3, 5]]);
    }

    #[test]
    fn random_subset_keeps_the_same_pairs() {
        let p = problem();
        let policy = biased_policy(0.3);
        let prm = PrmParams::zeros(map());
        let budget = SamplingBudget { m: 32, n: 0, t: 2 };
        let full = build_pairs(
            &policy,
            &prm,
            &p,
            &budget,
            &PairingConfig::default(),
            &mut stream_rng(3, "pairs", 0),
        )
        .unwrap();
        let shuffled = build_pairs(
            &policy,
            &prm,
            &p,
            &budget,
            &PairingConfig {
                mode: PairingMode::RandomSubset,
                ..PairingConfig::default()
            },
            &mut stream_rng(3, "pairs", 0),
        )
        .unwrap();
        assert_eq!(full.pairs.len(), shuffled.pairs.len());
        for pair in &shuffled.pairs {
            assert!(full.pairs.contains(pair));
        }
    }
}
