//! Process reward model: self-generated step labels, BCE training, scoring.
//!
//! Labels come from the policy's own samples. In Monte Carlo mode the label of
//! step `i` is the fraction of `N` rollouts continuing after step `i` that reach
//! the gold answer. In simplified mode (`N = 0`) every step inherits the
//! outcome of the solution it belongs to, so no rollouts are run.

use std::collections::HashMap;
use std::ops::AddAssign;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{check_answer, EnvError, Problem, Solution, StepSampler};
use crate::math::sigmoid;
use crate::policy::{FeatureMap, PolicyError};
use crate::seed::stream_rng;

#[derive(Debug, Error, PartialEq)]
pub enum PrmError {
    #[error("PRM training set is empty")]
    EmptyDataset,
    #[error("cannot aggregate an empty score list")]
    EmptyScores,
    #[error("invalid sampling budget: {0}")]
    Budget(String),
    #[error("example refers to unknown problem {0}")]
    UnknownProblem(u64),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// `M` solutions per problem, `N` simulations per step, `T` pairs per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingBudget {
    pub m: usize,
    pub n: usize,
    pub t: usize,
}

impl Default for SamplingBudget {
    fn default() -> Self {
        SamplingBudget { m: 32, n: 0, t: 4 }
    }
}

impl SamplingBudget {
    pub fn validate(&self) -> Result<(), PrmError> {
        if self.m < 1 {
            return Err(PrmError::Budget("M must be at least 1".into()));
        }
        if self.t < 1 || 2 * self.t > self.m {
            return Err(PrmError::Budget(format!(
                "T = {} must satisfy 1 <= T <= M/2 (M = {})",
                self.t, self.m
            )));
        }
        Ok(())
    }

    pub fn mode(&self) -> LabelMode {
        LabelMode::from_n(self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Broadcast the solution outcome to every step.
    Simple,
    /// Average of `N` rollout outcomes per step.
    MonteCarlo(usize),
}

impl LabelMode {
    pub fn from_n(n: usize) -> Self {
        if n == 0 {
            LabelMode::Simple
        } else {
            LabelMode::MonteCarlo(n)
        }
    }

    pub fn n(&self) -> usize {
        match self {
            LabelMode::Simple => 0,
            LabelMode::MonteCarlo(n) => *n,
        }
    }
}

/// Instrumented work counters for label construction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCost {
    /// Outcome evaluations feeding step labels. Simple mode reads the
    /// sampled solution's outcome once per step (`M*K`); Monte Carlo mode
    /// evaluates `N` rollout outcomes per step (`M*N*K`), where the final
    /// step's rollouts are the finished solution itself.
    pub label_evals: u64,
    /// Rollouts launched.
    pub rollouts: u64,
    /// Policy steps generated, for the `M` base samples and all rollouts.
    pub generated_steps: u64,
}

impl AddAssign for LabelCost {
    fn add_assign(&mut self, o: Self) {
        self.label_evals += o.label_evals;
        self.rollouts += o.rollouts;
        self.generated_steps += o.generated_steps;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmExample {
    pub problem_id: u64,
    pub prefix: Vec<u32>,
    /// Claimed value of the labeled step.
    pub step: u32,
    pub label: f64,
}

/// Monte Carlo label of step `i` of `y`: the fraction of `n` continuations of
/// `y[..=i]` under `sampler` that end at the gold answer. The final step has
/// no continuation, so its label is the solution's own outcome.
pub fn mc_label<S: StepSampler + ?Sized, R: Rng + ?Sized>(
    sampler: &S,
    p: &Problem,
    y: &Solution,
    i: usize,
    n: usize,
    rng: &mut R,
    cost: &mut LabelCost,
) -> Result<f64, PrmError> {
    assert!(n >= 1, "mc_label needs at least one simulation");
    let k = y.len();
    cost.label_evals += n as u64;
    if i + 1 >= k {
        return Ok(if check_answer(y, p)? { 1.0 } else { 0.0 });
    }
    let prefix = &y.steps[..=i];
    let mut hits = 0usize;
    for _ in 0..n {
        let rollout = Solution::new(p.id, sampler.complete(p, prefix, rng));
        cost.rollouts += 1;
        cost.generated_steps += (k - i - 1) as u64;
        if check_answer(&rollout, p)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Outcome indicator broadcast to every step.
pub fn simple_label(y: &Solution, p: &Problem) -> Result<Vec<f64>, PrmError> {
    let label = if check_answer(y, p)? { 1.0 } else { 0.0 };
    Ok(vec![label; y.len()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrmDataset {
    pub examples: Vec<PrmExample>,
    pub cost: LabelCost,
}

/// Sample `M` solutions per problem from `sampler` and label every step.
///
/// Problems are processed in parallel, each with its own RNG stream derived
/// from `seed` and the problem's position; output keeps problem order.
pub fn build_prm_dataset<S: StepSampler + Sync + ?Sized>(
    sampler: &S,
    problems: &[Problem],
    budget: &SamplingBudget,
    seed: u64,
) -> Result<PrmDataset, PrmError> {
    if budget.m < 1 {
        return Err(PrmError::Budget("M must be at least 1".into()));
    }
    let mode = budget.mode();
    let per_problem: Vec<Result<(Vec<PrmExample>, LabelCost), PrmError>> = problems
        .par_iter()
        .enumerate()
        .map(|(idx, p)| {
            let mut rng = stream_rng(seed, "prm-data", idx as u64);
            let mut cost = LabelCost::default();
            let mut rows = Vec::with_capacity(budget.m * p.depth());
            for _ in 0..budget.m {
                let y = Solution::new(p.id, sampler.complete(p, &[], &mut rng));
                cost.generated_steps += y.len() as u64;
                let labels = match mode {
                    LabelMode::Simple => {
                        cost.label_evals += y.len() as u64;
                        simple_label(&y, p)?
                    }
                    LabelMode::MonteCarlo(n) => (0..y.len())
                        .map(|i| mc_label(sampler, p, &y, i, n, &mut rng, &mut cost))
                        .collect::<Result<_, _>>()?,
                };
                rows.extend(labels.into_iter().enumerate().map(|(i, label)| PrmExample {
                    problem_id: p.id,
                    prefix: y.steps[..i].to_vec(),
                    step: y.steps[i],
                    label,
                }));
            }
            Ok((rows, cost))
        })
        .collect();

    let mut examples = Vec::new();
    let mut cost = LabelCost::default();
    for r in per_problem {
        let (rows, c) = r?;
        examples.extend(rows);
        cost += c;
    }
    Ok(PrmDataset { examples, cost })
}

/// Per-step sigmoid scorer sharing the policy's feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmParams {
    pub map: FeatureMap,
    pub theta: Vec<f64>,
    pub bias: f64,
}

impl PrmParams {
    pub fn zeros(map: FeatureMap) -> Self {
        PrmParams {
            map,
            theta: vec![0.0; map.num_entries()],
            bias: 0.0,
        }
    }

    /// Table entry for taking `step` after `prefix`.
    pub fn entry(&self, p: &Problem, prefix: &[u32], step: u32) -> Result<usize, PrmError> {
        let state = self.map.state(p, prefix)?;
        if step >= self.map.modulus {
            return Err(PolicyError::Incompatible {
                id: p.id,
                reason: format!("step value {step} outside [0, V)"),
            }
            .into());
        }
        Ok(self.map.entry(self.map.feature(&state), step))
    }

    pub fn logit(&self, p: &Problem, prefix: &[u32], step: u32) -> Result<f64, PrmError> {
        Ok(self.theta[self.entry(p, prefix, step)?] + self.bias)
    }
}

pub fn prm_score(prm: &PrmParams, p: &Problem, prefix: &[u32], step: u32) -> Result<f64, PrmError> {
    Ok(sigmoid(prm.logit(p, prefix, step)?))
}

/// Scores of every step of `y`, in order.
pub fn score_steps(prm: &PrmParams, p: &Problem, y: &Solution) -> Result<Vec<f64>, PrmError> {
    (0..y.len())
        .map(|i| prm_score(prm, p, &y.steps[..i], y.steps[i]))
        .collect()
}

pub fn min_aggregate(scores: &[f64]) -> Result<f64, PrmError> {
    scores
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or(PrmError::EmptyScores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrmTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Binarize labels at this threshold before training; soft labels when
    /// unset.
    pub label_threshold: Option<f64>,
    pub seed: u64,
}

impl Default for PrmTrainConfig {
    fn default() -> Self {
        PrmTrainConfig {
            epochs: 1,
            learning_rate: 0.5,
            batch_size: 1,
            label_threshold: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmTrainReport {
    pub initial_loss: f64,
    /// Mean BCE over the dataset after each epoch.
    pub epoch_losses: Vec<f64>,
}

fn bce(label: f64, logit: f64) -> f64 {
    // -[y log s(z) + (1 - y) log s(-z)]
    -(label * crate::math::log_sigmoid(logit) + (1.0 - label) * crate::math::log_sigmoid(-logit))
}

/// Minimize mean step-level BCE by mini-batch gradient descent from zero
/// parameters.
pub fn train_prm(
    map: FeatureMap,
    problems: &[Problem],
    dataset: &[PrmExample],
    cfg: &PrmTrainConfig,
) -> Result<(PrmParams, PrmTrainReport), PrmError> {
    if dataset.is_empty() {
        return Err(PrmError::EmptyDataset);
    }
    let by_id: HashMap<u64, &Problem> = problems.iter().map(|p| (p.id, p)).collect();
    let mut prm = PrmParams::zeros(map);
    let rows: Vec<(usize, f64)> = dataset
        .iter()
        .map(|ex| {
            let p = by_id
                .get(&ex.problem_id)
                .ok_or(PrmError::UnknownProblem(ex.problem_id))?;
            let label = match cfg.label_threshold {
                Some(t) => f64::from(u8::from(ex.label >= t)),
                None => ex.label,
            };
            Ok((prm.entry(p, &ex.prefix, ex.step)?, label))
        })
        .collect::<Result<_, PrmError>>()?;

    let mean_loss = |prm: &PrmParams| {
        rows.iter()
            .map(|&(e, y)| bce(y, prm.theta[e] + prm.bias))
            .sum::<f64>()
            / rows.len() as f64
    };
    let initial_loss = mean_loss(&prm);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.seed, "prm-train", epoch as u64));
        for chunk in order.chunks(batch) {
            let scale = cfg.learning_rate / chunk.len() as f64;
            let mut bias_grad = 0.0;
            let grads: Vec<(usize, f64)> = chunk
                .iter()
                .map(|&r| {
                    let (e, y) = rows[r];
                    let g = sigmoid(prm.theta[e] + prm.bias) - y;
                    bias_grad += g;
                    (e, g)
                })
                .collect();
            for (e, g) in grads {
                prm.theta[e] -= scale * g;
            }
            prm.bias -= scale * bias_grad;
        }
        epoch_losses.push(mean_loss(&prm));
    }
    Ok((
        prm,
        PrmTrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}
