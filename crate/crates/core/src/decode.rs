//! Inference strategies: greedy, self-consistency, best-of-N and step-wise
//! beam search guided by the PRM.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{gold_answer, Problem, Solution, StepSampler};
use crate::math::mean;
use crate::policy::PolicyParams;
use crate::prm::{min_aggregate, prm_score, score_steps, PrmError, PrmParams};
use crate::seed::stream_rng;

/// How a partial beam is ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeamScore {
    /// PRM score of the newest step.
    #[default]
    NewestStep,
    /// Minimum PRM score over the whole prefix, ties broken by the mean.
    MinPrefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// Samples drawn by self-consistency and best-of-N.
    pub n_samples: usize,
    pub temperature: f64,
    /// Candidate steps sampled per beam and level.
    pub b1: usize,
    /// Beams kept per level.
    pub b2: usize,
    /// Maximum number of beam-search levels.
    pub max_steps: usize,
    pub beam_score: BeamScore,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            n_samples: 5,
            temperature: 0.8,
            b1: 5,
            b2: 1,
            max_steps: 16,
            beam_score: BeamScore::NewestStep,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_samples < 1 {
            return Err("n_samples must be >= 1".into());
        }
        if !(self.temperature > 0.0) {
            return Err("temperature must be positive".into());
        }
        if self.b2 < 1 || self.b1 < self.b2 {
            return Err(format!("need b1 >= b2 >= 1, got b1={} b2={}", self.b1, self.b2));
        }
        if self.max_steps < 1 {
            return Err("max_steps must be >= 1".into());
        }
        Ok(())
    }
}

/// Most frequent answer; ties go to the smaller answer.
pub fn majority_answer(answers: impl IntoIterator<Item = u32>) -> Option<u32> {
    let mut counts = BTreeMap::new();
    for a in answers {
        *counts.entry(a).or_insert(0usize) += 1;
    }
    let mut best: Option<(u32, usize)> = None;
    for (a, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((a, c));
        }
    }
    best.map(|(a, _)| a)
}

pub fn self_consistency<R: Rng + ?Sized>(
    policy: &PolicyParams,
    p: &Problem,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> u32 {
    let answers: Vec<u32> = (0..cfg.n_samples)
        .map(|_| {
            policy
                .sample_solution(p, cfg.temperature, rng)
                .answer()
                .expect("problems have at least one step")
        })
        .collect();
    majority_answer(answers).expect("n_samples >= 1")
}

/// Index of the candidate with the largest minimum step score; ties go to the
/// larger mean score, then the earlier candidate.
pub fn select_by_min_score(step_scores: &[Vec<f64>]) -> Result<usize, PrmError> {
    let keyed: Vec<(f64, f64)> = step_scores
        .iter()
        .map(|s| Ok((min_aggregate(s)?, mean(s))))
        .collect::<Result<_, PrmError>>()?;
    if keyed.is_empty() {
        return Err(PrmError::EmptyScores);
    }
    let mut best = 0;
    for (i, k) in keyed.iter().enumerate().skip(1) {
        let b = keyed[best];
        if k.0 > b.0 || (k.0 == b.0 && k.1 > b.1) {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestOfN {
    pub solution: Solution,
    pub chosen: usize,
    /// Every sampled solution with its step scores, in sample order.
    pub pool: Vec<(Solution, Vec<f64>)>,
}

pub fn best_of_n<R: Rng + ?Sized>(
    policy: &PolicyParams,
    prm: &PrmParams,
    p: &Problem,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<BestOfN, PrmError> {
    let pool: Vec<(Solution, Vec<f64>)> = (0..cfg.n_samples)
        .map(|_| {
            let y = policy.sample_solution(p, cfg.temperature, rng);
            let scores = score_steps(prm, p, &y)?;
            Ok((y, scores))
        })
        .collect::<Result<_, PrmError>>()?;
    let scores: Vec<Vec<f64>> = pool.iter().map(|(_, s)| s.clone()).collect();
    let chosen = select_by_min_score(&scores)?;
    Ok(BestOfN {
        solution: pool[chosen].0.clone(),
        chosen,
        pool,
    })
}

#[derive(Debug, Clone, PartialEq)]
struct Beam {
    steps: Vec<u32>,
    scores: Vec<f64>,
}

impl Beam {
    /// Ranking key, compared lexicographically.
    fn rank(&self, mode: BeamScore) -> (f64, f64) {
        let newest = *self.scores.last().expect("beams are never empty");
        match mode {
            BeamScore::NewestStep => (newest, 0.0),
            BeamScore::MinPrefix => (
                self.scores.iter().copied().fold(f64::INFINITY, f64::min),
                mean(&self.scores),
            ),
        }
    }
}

fn better(a: (f64, f64), b: (f64, f64)) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutcome {
    pub steps: Vec<u32>,
    /// False when the step budget ran out before any beam finished.
    pub complete: bool,
    pub score: f64,
    pub levels: usize,
    /// Largest number of beams kept after any selection.
    pub max_width: usize,
    /// Largest candidate pool seen before any selection.
    pub max_expansion: usize,
}

impl BeamOutcome {
    pub fn solution(&self, problem_id: u64) -> Option<Solution> {
        self.complete
            .then(|| Solution::new(problem_id, self.steps.clone()))
    }
}

/// Step-level beam search: sample `b1` next steps per beam, score each
/// extension with the PRM, keep the best `b2`, until every beam is complete or
/// `max_steps` levels have run.
pub fn step_beam_search<R: Rng + ?Sized>(
    policy: &PolicyParams,
    prm: &PrmParams,
    p: &Problem,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<BeamOutcome, PrmError> {
    let sampler = policy.at_temperature(cfg.temperature);
    let depth = p.depth();
    let expand = |beam: &Beam, rng: &mut R| -> Result<Vec<Beam>, PrmError> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for _ in 0..cfg.b1 {
            let next = sampler.sample_step(p, &beam.steps, rng);
            if !seen.insert(next) {
                continue;
            }
            let mut scores = beam.scores.clone();
            scores.push(prm_score(prm, p, &beam.steps, next)?);
            let mut steps = beam.steps.clone();
            steps.push(next);
            out.push(Beam { steps, scores });
        }
        Ok(out)
    };
    let select = |mut pool: Vec<Beam>| {
        // stable: equal ranks keep generation order
        pool.sort_by(|a, b| better(a.rank(cfg.beam_score), b.rank(cfg.beam_score)));
        pool.truncate(cfg.b2);
        pool
    };

    let root = Beam {
        steps: Vec::new(),
        scores: Vec::new(),
    };
    let first = expand(&root, rng)?;
    let mut max_expansion = first.len();
    let mut beams = select(first);
    let mut max_width = beams.len();
    let mut levels = 1;
    while levels < cfg.max_steps {
        if beams.iter().all(|b| b.steps.len() >= depth) {
            break;
        }
        let mut pool = Vec::new();
        for beam in &beams {
            if beam.steps.len() >= depth {
                pool.push(beam.clone());
            } else {
                pool.extend(expand(beam, rng)?);
            }
        }
        max_expansion = max_expansion.max(pool.len());
        beams = select(pool);
        max_width = max_width.max(beams.len());
        levels += 1;
    }

    let finished = beams.iter().filter(|b| b.steps.len() >= depth);
    let pick = |it: &mut dyn Iterator<Item = &Beam>| {
        it.fold(None::<&Beam>, |best, b| match best {
            Some(x) if better(x.rank(cfg.beam_score), b.rank(cfg.beam_score)) != Ordering::Greater => Some(x),
            _ => Some(b),
        })
        .cloned()
    };
    let (best, complete) = match pick(&mut finished.into_iter()) {
        Some(b) => (b, true),
        None => (pick(&mut beams.iter()).expect("at least one beam"), false),
    };
    Ok(BeamOutcome {
        score: best.rank(cfg.beam_score).0,
        steps: best.steps,
        complete,
        levels,
        max_width,
        max_expansion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    SelfConsistency,
    BestOfN,
    StepBeamSearch,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Greedy,
        Strategy::SelfConsistency,
        Strategy::BestOfN,
        Strategy::StepBeamSearch,
    ];

    pub fn needs_prm(self) -> bool {
        matches!(self, Strategy::BestOfN | Strategy::StepBeamSearch)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Greedy => "greedy",
            Strategy::SelfConsistency => "sc",
            Strategy::BestOfN => "bon",
            Strategy::StepBeamSearch => "sbs",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "sc" | "self-consistency" => Ok(Strategy::SelfConsistency),
            "bon" | "best-of-n" => Ok(Strategy::BestOfN),
            "sbs" | "beam" | "step-beam-search" => Ok(Strategy::StepBeamSearch),
            other => Err(format!("unknown strategy '{other}'")),
        }
    }
}

/// Answer returned by `strategy` on `p`, `None` when beam search ran out of
/// steps.
pub fn decode_answer<R: Rng + ?Sized>(
    strategy: Strategy,
    policy: &PolicyParams,
    prm: Option<&PrmParams>,
    p: &Problem,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Option<u32>, PrmError> {
    let need = || prm.ok_or(PrmError::Budget(format!("strategy {strategy} needs a PRM")));
    Ok(match strategy {
        Strategy::Greedy => policy.greedy_decode(p).answer(),
        Strategy::SelfConsistency => Some(self_consistency(policy, p, cfg, rng)),
        Strategy::BestOfN => best_of_n(policy, need()?, p, cfg, rng)?.solution.answer(),
        Strategy::StepBeamSearch => {
            let out = step_beam_search(policy, need()?, p, cfg, rng)?;
            out.complete.then(|| *out.steps.last().expect("complete beam"))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub strategy: Strategy,
    pub n_samples: usize,
    pub b1: usize,
    pub b2: usize,
    pub seed: u64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Not reproducible; kept out of deterministic artifacts.
    #[serde(skip)]
    pub mean_wall_ms: f64,
}

/// Fraction of `problems` whose decoded answer is gold. Each problem gets its
/// own RNG stream, so the result does not depend on scheduling.
pub fn evaluate_accuracy(
    strategy: Strategy,
    policy: &PolicyParams,
    prm: Option<&PrmParams>,
    problems: &[Problem],
    cfg: &DecodeConfig,
    seed: u64,
) -> Result<AccuracyReport, PrmError> {
    let label = format!("eval-{strategy}");
    let outcomes: Vec<Result<(bool, f64), PrmError>> = problems
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let started = Instant::now();
            let mut rng = stream_rng(seed, &label, i as u64);
            let answer = decode_answer(strategy, policy, prm, p, cfg, &mut rng)?;
            let ok = answer == Some(gold_answer(p));
            Ok((ok, started.elapsed().as_secs_f64() * 1e3))
        })
        .collect();
    let mut correct = 0;
    let mut wall = 0.0;
    for o in outcomes {
        let (ok, ms) = o?;
        correct += usize::from(ok);
        wall += ms;
    }
    let total = problems.len();
    Ok(AccuracyReport {
        strategy,
        n_samples: cfg.n_samples,
        b1: cfg.b1,
        b2: cfg.b2,
        seed,
        correct,
        total,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        mean_wall_ms: if total == 0 { 0.0 } else { wall / total as f64 },
    })
}
