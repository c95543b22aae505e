//! DPO with step-reward weighted gradients.
//!
//! For a pair `(y_w, y_l)` the update direction is
//!
//! ```text
//! g = -beta * sigmoid(r_l - r_w) * [ sum_i a_i^w grad log pi(s_i^w | x, s_<i^w)
//!                                  - sum_i a_i^l grad log pi(s_i^l | x, s_<i^l) ]
//! ```
//!
//! where `r = beta * (log pi(y|x) - log pi_ref(y|x))` is the implicit reward,
//! `a^w = softmax(gamma * rewards_w)` and `a^l = softmax(-gamma * rewards_l)`.
//! The sigmoid factor and the weights are constants with respect to theta.
//! At `gamma = 0` every weight is `1/K` and the update is the vanilla DPO
//! gradient under the `1/K` step convention.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Problem, Solution};
use crate::grad::SparseGrad;
use crate::math::{log_sigmoid, sigmoid, softmax};
use crate::pairing::PreferencePair;
use crate::policy::{Optimizer, OptimizerKind, PolicyError, PolicyParams, ReferencePolicy};
use crate::seed::stream_rng;

#[derive(Debug, Error, PartialEq)]
pub enum DpoError {
    #[error("alpha weights need at least one reward")]
    EmptyRewards,
    #[error("no preference pairs to train on")]
    NoPairs,
    #[error("invalid DPO config: {0}")]
    Config(String),
    #[error("pair {pair} of problem {problem_id} produced a non-finite gradient")]
    NonFinite { problem_id: u64, pair: usize },
    #[error("training diverged at step {step}: loss {loss} > 10x initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("pair refers to unknown problem {0}")]
    UnknownProblem(u64),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up over `warmup_ratio` of all updates, then linear decay
    /// to zero.
    LinearDecay { warmup_ratio: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::LinearDecay { warmup_ratio } => {
                let total = total.max(1) as f64;
                let warmup = (warmup_ratio * total).ceil();
                let t = step as f64;
                if t < warmup {
                    base * (t + 1.0) / warmup
                } else {
                    base * ((total - t) / (total - warmup).max(1.0)).max(0.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    /// Softmax temperature of the step weights.
    pub gamma: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Shuffle pair order each epoch; canonical order otherwise.
    pub shuffle: bool,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerKind,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.05,
            gamma: 0.5,
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 64,
            shuffle: false,
            seed: 0,
            schedule: LrSchedule::Constant,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if !(self.beta > 0.0) {
            return Err(DpoError::Config(format!("beta = {} must be positive", self.beta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(DpoError::Config(format!("gamma = {} must be >= 0", self.gamma)));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(DpoError::Config("negative learning rate".into()));
        }
        if self.batch_size == 0 {
            return Err(DpoError::Config("batch size 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Preferred,
    Dispreferred,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaWeights {
    pub weights: Vec<f64>,
}

/// `softmax(gamma * r)` for the preferred side, `softmax(-gamma * r)` for the
/// dispreferred side.
pub fn alpha_weights(rewards: &[f64], gamma: f64, side: Side) -> Result<AlphaWeights, DpoError> {
    if rewards.is_empty() {
        return Err(DpoError::EmptyRewards);
    }
    let sign = match side {
        Side::Preferred => 1.0,
        Side::Dispreferred => -1.0,
    };
    let scaled: Vec<f64> = rewards.iter().map(|r| sign * gamma * r).collect();
    Ok(AlphaWeights {
        weights: softmax(&scaled),
    })
}

/// `beta * (log pi(y|x) - log pi_ref(y|x))`
pub fn implicit_reward(
    policy: &PolicyParams,
    reference: &PolicyParams,
    p: &Problem,
    y: &Solution,
    beta: f64,
) -> Result<f64, DpoError> {
    Ok(beta * (policy.solution_logprob(p, y)? - reference.solution_logprob(p, y)?))
}

/// Implicit reward margin `r_w - r_l`.
pub fn reward_margin(
    policy: &PolicyParams,
    reference: &PolicyParams,
    p: &Problem,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64, DpoError> {
    Ok(implicit_reward(policy, reference, p, &pair.preferred.solution, beta)?
        - implicit_reward(policy, reference, p, &pair.dispreferred.solution, beta)?)
}

/// `-log sigmoid(r_w - r_l)`
pub fn dpo_loss(
    policy: &PolicyParams,
    reference: &PolicyParams,
    p: &Problem,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64, DpoError> {
    Ok(-log_sigmoid(reward_margin(policy, reference, p, pair, beta)?))
}

/// `sum_i weights[i] * grad log pi(s_i | x, s_<i)`, accumulated into `g` with
/// an extra `scale`.
fn accumulate_steps(
    g: &mut SparseGrad,
    policy: &PolicyParams,
    p: &Problem,
    y: &Solution,
    weights: &[f64],
    scale: f64,
) -> Result<(), DpoError> {
    for (step, &w) in y.iter_steps().zip(weights) {
        let step_grad = policy.grad_step_logprob(p, &y.steps[..step.index], step)?;
        g.add_scaled(&step_grad, scale * w);
    }
    Ok(())
}

fn guard(g: SparseGrad, pair: &PreferencePair, index: usize) -> Result<SparseGrad, DpoError> {
    if g.is_finite() {
        Ok(g)
    } else {
        Err(DpoError::NonFinite {
            problem_id: pair.problem_id,
            pair: index,
        })
    }
}

/// Step-weighted DPO gradient for one pair.
pub fn full_step_gradient(
    policy: &PolicyParams,
    reference: &PolicyParams,
    p: &Problem,
    pair: &PreferencePair,
    cfg: &DpoConfig,
) -> Result<SparseGrad, DpoError> {
    let margin = reward_margin(policy, reference, p, pair, cfg.beta)?;
    let coef = -cfg.beta * sigmoid(-margin);
    let aw = alpha_weights(&pair.preferred.rewards, cfg.gamma, Side::Preferred)?;
    let al = alpha_weights(&pair.dispreferred.rewards, cfg.gamma, Side::Dispreferred)?;
    let mut g = SparseGrad::new();
    accumulate_steps(&mut g, policy, p, &pair.preferred.solution, &aw.weights, coef)?;
    accumulate_steps(&mut g, policy, p, &pair.dispreferred.solution, &al.weights, -coef)?;
    guard(g, pair, 0)
}

/// Vanilla DPO gradient with every step weighted `1/K` on its side.
pub fn vanilla_dpo_gradient(
    policy: &PolicyParams,
    reference: &PolicyParams,
    p: &Problem,
    pair: &PreferencePair,
    beta: f64,
) -> Result<SparseGrad, DpoError> {
    let margin = reward_margin(policy, reference, p, pair, beta)?;
    let coef = -beta * sigmoid(-margin);
    let mut g = SparseGrad::new();
    for (y, sign) in [(&pair.preferred.solution, 1.0), (&pair.dispreferred.solution, -1.0)] {
        let w = 1.0 / y.len() as f64;
        for step in y.iter_steps() {
            let step_grad = policy.grad_step_logprob(p, &y.steps[..step.index], step)?;
            g.add_scaled(&step_grad, sign * coef * w);
        }
    }
    guard(g, pair, 0)
}

/// Exact gradient of [`dpo_loss`]: every step carries weight one.
pub fn classic_dpo_gradient(
    policy: &PolicyParams,
    reference: &PolicyParams,
    p: &Problem,
    pair: &PreferencePair,
    beta: f64,
) -> Result<SparseGrad, DpoError> {
    let margin = reward_margin(policy, reference, p, pair, beta)?;
    let coef = -beta * sigmoid(-margin);
    let mut g = SparseGrad::new();
    let ones = vec![1.0; pair.preferred.solution.len().max(pair.dispreferred.solution.len())];
    accumulate_steps(&mut g, policy, p, &pair.preferred.solution, &ones, coef)?;
    accumulate_steps(&mut g, policy, p, &pair.dispreferred.solution, &ones, -coef)?;
    guard(g, pair, 0)
}

/// One row of the training metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub step: usize,
    /// Mean vanilla DPO loss over the batch, before the update.
    pub monitored_loss: f64,
    /// Mean implicit reward margin `r_w - r_l`, before the update.
    pub mean_margin: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct DpoOutcome {
    pub policy: PolicyParams,
    pub history: Vec<BatchMetrics>,
}

fn problem_index(problems: &[Problem]) -> HashMap<u64, &Problem> {
    problems.iter().map(|p| (p.id, p)).collect()
}

fn lookup<'a>(index: &HashMap<u64, &'a Problem>, id: u64) -> Result<&'a Problem, DpoError> {
    index.get(&id).copied().ok_or(DpoError::UnknownProblem(id))
}

/// Mini-batch training with the step-weighted gradient.
///
/// Pairs are visited in the given order (reshuffled per epoch when
/// `cfg.shuffle`); per-pair gradients are computed in parallel and summed in
/// batch order, so runs are bitwise reproducible. Aborts when the monitored
/// loss exceeds ten times its first value.
pub fn train_full_step_dpo(
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    problems: &[Problem],
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<DpoOutcome, DpoError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(DpoError::NoPairs);
    }
    let index = problem_index(problems);
    let mut policy = policy.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, policy.theta.len());
    let batches_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total = batches_per_epoch * cfg.epochs;
    let mut history = Vec::with_capacity(total);
    let mut initial_loss = None;
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.sort_unstable();
            order.shuffle(&mut stream_rng(cfg.seed, "dpo-epoch", epoch as u64));
        }
        for batch in order.chunks(cfg.batch_size) {
            let per_pair: Vec<Result<(f64, f64, SparseGrad), DpoError>> = batch
                .par_iter()
                .map(|&i| {
                    let pair = &pairs[i];
                    let p = lookup(&index, pair.problem_id)?;
                    let margin = reward_margin(&policy, reference, p, pair, cfg.beta)?;
                    let g = full_step_gradient(&policy, reference, p, pair, cfg).map_err(|e| match e {
                        DpoError::NonFinite { problem_id, .. } => DpoError::NonFinite { problem_id, pair: i },
                        other => other,
                    })?;
                    Ok((-log_sigmoid(margin), margin, g))
                })
                .collect();

            let n = batch.len() as f64;
            let mut grad = SparseGrad::new();
            let (mut loss, mut margin) = (0.0, 0.0);
            for r in per_pair {
                let (l, m, g) = r?;
                loss += l;
                margin += m;
                grad.add_scaled(&g, 1.0 / n);
            }
            let metrics = BatchMetrics {
                step: history.len(),
                monitored_loss: loss / n,
                mean_margin: margin / n,
                grad_norm: grad.norm(),
            };
            let initial = *initial_loss.get_or_insert(metrics.monitored_loss);
            if metrics.monitored_loss > 10.0 * initial {
                return Err(DpoError::Diverged {
                    step: metrics.step,
                    loss: metrics.monitored_loss,
                    initial,
                });
            }
            let lr = cfg.schedule.rate(cfg.learning_rate, metrics.step, total);
            optimizer.step(&mut policy, &grad, lr)?;
            history.push(metrics);
        }
    }
    Ok(DpoOutcome { policy, history })
}

/// Plain vanilla DPO trainer: canonical pair order, mean batch gradient of
/// [`vanilla_dpo_gradient`], constant-rate SGD. Returns the trained policy
/// and the gradient norm of every update.
#[allow(clippy::too_many_arguments)]
pub fn train_vanilla_dpo(
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    problems: &[Problem],
    pairs: &[PreferencePair],
    beta: f64,
    learning_rate: f64,
    batch_size: usize,
    epochs: usize,
) -> Result<(PolicyParams, Vec<f64>), DpoError> {
    if pairs.is_empty() {
        return Err(DpoError::NoPairs);
    }
    let index = problem_index(problems);
    let mut policy = policy.clone();
    let mut norms = Vec::new();
    for _ in 0..epochs {
        for batch in pairs.chunks(batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grad = SparseGrad::new();
            for pair in batch {
                let p = lookup(&index, pair.problem_id)?;
                grad.add_scaled(&vanilla_dpo_gradient(&policy, reference, p, pair, beta)?, scale);
            }
            norms.push(grad.norm());
            crate::policy::apply_gradient(&mut policy, &grad, learning_rate)?;
        }
    }
    Ok((policy, norms))
}
