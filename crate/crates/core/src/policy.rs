//! Tabular softmax step-policy.
//!
//! The policy keeps one logit per (state feature, claimed value). At each
//! state only the candidate values are eligible: the true next value plus
//! `branching - 1` nearby perturbations. Log-probabilities, their gradients and
//! ancestral sampling are all exact.

use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Problem, Solution, State, Step, StepSampler};
use crate::grad::SparseGrad;
use crate::math::{log_softmax, softmax};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("value {value} is not a candidate at step {index}")]
    NotCandidate { index: usize, value: u32 },
    #[error("problem {id} does not fit the feature map: {reason}")]
    Incompatible { id: u64, reason: String },
    #[error("prefix of length {len} leaves no step to take (depth {depth})")]
    PrefixTooLong { len: usize, depth: usize },
    #[error("non-finite gradient entry at coordinate {index}")]
    NonFiniteGradient { index: usize },
    #[error("parameter length {got} does not match feature map ({expected})")]
    ShapeMismatch { got: usize, expected: usize },
}

/// Layout of the logit table.
///
/// A state feature is `(step index, previous claimed value, op kind, operand)`;
/// the table has one entry per feature and per value in `[0, V)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMap {
    pub modulus: u32,
    pub depth: usize,
    /// Candidate values per state (`B`), at most `modulus`.
    pub branching: usize,
}

impl FeatureMap {
    pub fn new(modulus: u32, depth: usize, branching: usize) -> Self {
        assert!(modulus >= 2 && depth >= 1, "degenerate feature map");
        assert!(
            (1..=modulus as usize).contains(&branching),
            "branching must lie in 1..=modulus"
        );
        FeatureMap {
            modulus,
            depth,
            branching,
        }
    }

    fn ops_per_kind(&self) -> usize {
        self.modulus as usize - 1
    }

    pub fn num_features(&self) -> usize {
        self.depth * self.modulus as usize * 3 * self.ops_per_kind()
    }

    pub fn num_entries(&self) -> usize {
        self.num_features() * self.modulus as usize
    }

    pub fn feature(&self, state: &State) -> usize {
        let v = self.modulus as usize;
        let op = state.op.kind.index() * self.ops_per_kind() + state.op.operand as usize - 1;
        ((state.index * v + state.prev_value as usize) * 3) * self.ops_per_kind() + op
    }

    pub fn entry(&self, feature: usize, value: u32) -> usize {
        feature * self.modulus as usize + value as usize
    }

    /// Candidate values at `state`, ascending. Perturbation offsets are taken
    /// in the order `0, +1, -1, +2, -2, ...` until `branching` values exist.
    pub fn candidates(&self, state: &State) -> Vec<u32> {
        let m = i64::from(self.modulus);
        let t = i64::from(state.true_next());
        let mut out: Vec<u32> = (0..self.branching as i64)
            .map(|k| {
                let offset = if k % 2 == 1 { (k + 1) / 2 } else { -(k / 2) };
                (t + offset).rem_euclid(m) as u32
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Check a problem fits the table and return the state after `prefix`.
    pub fn state(&self, p: &Problem, prefix: &[u32]) -> Result<State, PolicyError> {
        let incompatible = |reason: String| PolicyError::Incompatible { id: p.id, reason };
        if p.modulus != self.modulus {
            return Err(incompatible(format!("V = {} vs {}", p.modulus, self.modulus)));
        }
        if p.depth() > self.depth {
            return Err(incompatible(format!("D = {} vs {}", p.depth(), self.depth)));
        }
        if let Some(v) = prefix.iter().find(|&&v| v >= self.modulus) {
            return Err(incompatible(format!("claimed value {v} outside [0, V)")));
        }
        p.state_after(prefix).ok_or(PolicyError::PrefixTooLong {
            len: prefix.len(),
            depth: p.depth(),
        })
    }

    pub fn hash(&self) -> String {
        crate::digest::config_hash(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub map: FeatureMap,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    /// All-zero logits: uniform over candidates everywhere.
    pub fn uniform(map: FeatureMap) -> Self {
        PolicyParams {
            map,
            theta: vec![0.0; map.num_entries()],
        }
    }

    pub fn check_shape(&self) -> Result<(), PolicyError> {
        if self.theta.len() != self.map.num_entries() {
            return Err(PolicyError::ShapeMismatch {
                got: self.theta.len(),
                expected: self.map.num_entries(),
            });
        }
        Ok(())
    }

    /// Candidate values at the state after `prefix`, their table entries and
    /// logits, in candidate order.
    pub fn candidate_logits(
        &self,
        p: &Problem,
        prefix: &[u32],
    ) -> Result<Vec<(u32, usize, f64)>, PolicyError> {
        let state = self.map.state(p, prefix)?;
        let feature = self.map.feature(&state);
        Ok(self
            .map
            .candidates(&state)
            .into_iter()
            .map(|v| {
                let e = self.map.entry(feature, v);
                (v, e, self.theta[e])
            })
            .collect())
    }

    /// Next-step distribution at `temperature`, in candidate order.
    pub fn step_distribution(
        &self,
        p: &Problem,
        prefix: &[u32],
        temperature: f64,
    ) -> Result<Vec<(u32, f64)>, PolicyError> {
        let cands = self.candidate_logits(p, prefix)?;
        let scaled: Vec<f64> = cands.iter().map(|c| c.2 / temperature).collect();
        Ok(cands.iter().map(|c| c.0).zip(softmax(&scaled)).collect())
    }

    /// `log pi(step | x, prefix)` at temperature one.
    pub fn step_logprob(&self, p: &Problem, prefix: &[u32], step: Step) -> Result<f64, PolicyError> {
        let cands = self.candidate_logits(p, prefix)?;
        let pos = position(&cands, prefix.len(), step)?;
        let logits: Vec<f64> = cands.iter().map(|c| c.2).collect();
        Ok(log_softmax(&logits)[pos])
    }

    /// Sum of step log-probabilities along `y`.
    pub fn solution_logprob(&self, p: &Problem, y: &Solution) -> Result<f64, PolicyError> {
        y.iter_steps()
            .map(|s| self.step_logprob(p, &y.steps[..s.index], s))
            .sum()
    }

    /// Gradient of `step_logprob` w.r.t. theta: `onehot - softmax` on the
    /// state's candidate entries.
    pub fn grad_step_logprob(
        &self,
        p: &Problem,
        prefix: &[u32],
        step: Step,
    ) -> Result<SparseGrad, PolicyError> {
        let cands = self.candidate_logits(p, prefix)?;
        let pos = position(&cands, prefix.len(), step)?;
        let logits: Vec<f64> = cands.iter().map(|c| c.2).collect();
        Ok(softmax(&logits)
            .into_iter()
            .zip(&cands)
            .enumerate()
            .map(|(k, (prob, c))| (c.1, if k == pos { 1.0 - prob } else { -prob }))
            .collect())
    }

    pub fn sample_solution<R: Rng + ?Sized>(
        &self,
        p: &Problem,
        temperature: f64,
        rng: &mut R,
    ) -> Solution {
        assert!(temperature > 0.0, "temperature must be positive");
        let steps = self.at_temperature(temperature).complete(p, &[], rng);
        Solution::new(p.id, steps)
    }

    /// Argmax at every step; ties go to the lowest candidate index.
    pub fn greedy_decode(&self, p: &Problem) -> Solution {
        let mut steps = Vec::with_capacity(p.depth());
        while steps.len() < p.depth() {
            let cands = self
                .candidate_logits(p, &steps)
                .expect("problem fits the feature map");
            let mut best = cands[0];
            for &c in &cands[1..] {
                if c.2 > best.2 {
                    best = c;
                }
            }
            steps.push(best.0);
        }
        Solution::new(p.id, steps)
    }

    pub fn at_temperature(&self, temperature: f64) -> Tempered<'_> {
        Tempered {
            params: self,
            temperature,
        }
    }
}

fn position(cands: &[(u32, usize, f64)], index: usize, step: Step) -> Result<usize, PolicyError> {
    cands
        .iter()
        .position(|c| c.0 == step.claimed_value)
        .ok_or(PolicyError::NotCandidate {
            index,
            value: step.claimed_value,
        })
}

/// The policy's step distribution at a sampling temperature.
#[derive(Debug, Clone, Copy)]
pub struct Tempered<'a> {
    pub params: &'a PolicyParams,
    pub temperature: f64,
}

impl StepSampler for Tempered<'_> {
    fn step_probs(&self, problem: &Problem, prefix: &[u32]) -> Vec<(u32, f64)> {
        self.params
            .step_distribution(problem, prefix, self.temperature)
            .expect("problem fits the feature map")
    }
}

impl StepSampler for PolicyParams {
    fn step_probs(&self, problem: &Problem, prefix: &[u32]) -> Vec<(u32, f64)> {
        self.at_temperature(1.0).step_probs(problem, prefix)
    }
}

/// Frozen snapshot of a policy. There is no mutable access to the inner
/// parameters.
#[derive(Debug, Clone)]
pub struct ReferencePolicy(Arc<PolicyParams>);

impl ReferencePolicy {
    pub fn freeze(params: &PolicyParams) -> Self {
        ReferencePolicy(Arc::new(params.clone()))
    }
}

impl Deref for ReferencePolicy {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

/// Plain gradient step `theta -= lr * grad`.
pub fn apply_gradient(params: &mut PolicyParams, grad: &SparseGrad, lr: f64) -> Result<(), PolicyError> {
    check_finite(grad)?;
    for (i, g) in grad.iter() {
        params.theta[i] -= lr * g;
    }
    Ok(())
}

fn check_finite(grad: &SparseGrad) -> Result<(), PolicyError> {
    match grad.iter().find(|(_, g)| !g.is_finite()) {
        Some((index, _)) => Err(PolicyError::NonFiniteGradient { index }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

/// Optimizer with optional AdamW moments.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::AdamW { .. } => len,
        };
        Optimizer {
            kind,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &SparseGrad, lr: f64) -> Result<(), PolicyError> {
        match self.kind {
            OptimizerKind::Sgd => apply_gradient(params, grad, lr),
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                check_finite(grad)?;
                self.t += 1;
                let dense = grad.to_dense(params.theta.len());
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (i, g) in dense.into_iter().enumerate() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                    let theta = &mut params.theta[i];
                    *theta -= lr * (update + weight_decay * *theta);
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_problem, GeneratorConfig, OpKind, Op};
    use crate::seed::stream_rng;

    fn map() -> FeatureMap {
        FeatureMap::new(7, 3, 4)
    }

    fn problem() -> Problem {
        Problem {
            id: 3,
            start_value: 2,
            ops: vec![
                Op::new(OpKind::Add, 3),
                Op::new(OpKind::Mul, 2),
                Op::new(OpKind::Sub, 6),
            ],
            modulus: 7,
        }
    }

    fn random_params(seed: u64) -> PolicyParams {
        let mut rng = stream_rng(seed, "theta", 0);
        let mut params = PolicyParams::uniform(map());
        params.theta.iter_mut().for_each(|t| *t = rng.gen_range(-2.0..2.0));
        params
    }

    #[test]
    fn feature_map_is_injective_over_states() {
        let m = map();
        let mut seen = std::collections::HashSet::new();
        for index in 0..m.depth {
            for prev in 0..m.modulus {
                for kind in OpKind::ALL {
                    for operand in 1..m.modulus {
                        let s = State {
                            index,
                            prev_value: prev,
                            op: Op::new(kind, operand),
                            modulus: m.modulus,
                        };
                        let f = m.feature(&s);
                        assert!(f < m.num_features());
                        assert!(seen.insert(f));
                    }
                }
            }
        }
        assert_eq!(seen.len(), m.num_features());
    }

    #[test]
    fn candidates_contain_true_value_once() {
        let m = FeatureMap::new(5, 2, 5);
        let s = State {
            index: 0,
            prev_value: 4,
            op: Op::new(OpKind::Add, 1),
            modulus: 5,
        };
        let c = m.candidates(&s);
        assert_eq!(c, vec![0, 1, 2, 3, 4]);
        let c = FeatureMap::new(7, 1, 3).candidates(&State { modulus: 7, ..s });
        assert_eq!(c, vec![4, 5, 6]);
    }

    #[test]
    fn uniform_logprob() {
        let params = PolicyParams::uniform(map());
        let p = problem();
        let state = map().state(&p, &[]).unwrap();
        for v in map().candidates(&state) {
            let lp = params
                .step_logprob(&p, &[], Step { index: 0, claimed_value: v })
                .unwrap();
            assert!((lp - 0.25f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_logit() {
        let mut params = PolicyParams::uniform(map());
        let p = problem();
        let cands = params.candidate_logits(&p, &[]).unwrap();
        params.theta[cands[1].1] = 60.0;
        let lp = params
            .step_logprob(&p, &[], Step { index: 0, claimed_value: cands[1].0 })
            .unwrap();
        assert!(lp <= 0.0 && lp > -1e-20);
    }

    #[test]
    fn logprob_matches_direct_normalizer() {
        let params = random_params(1);
        let p = problem();
        let prefix = [5u32, 3];
        let cands = params.candidate_logits(&p, &prefix).unwrap();
        let z: f64 = cands.iter().map(|c| c.2.exp()).sum();
        for c in &cands {
            let direct = (c.2.exp() / z).ln();
            let lp = params
                .step_logprob(&p, &prefix, Step { index: 2, claimed_value: c.0 })
                .unwrap();
            assert!((lp - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn non_candidate_is_rejected() {
        let params = PolicyParams::uniform(map());
        let p = problem();
        // true next is 5; offsets 0,+1,-1,+2 give {0,4,5,6}
        let err = params
            .step_logprob(&p, &[], Step { index: 0, claimed_value: 2 })
            .unwrap_err();
        assert_eq!(err, PolicyError::NotCandidate { index: 0, value: 2 });
    }

    #[test]
    fn solution_logprob_is_additive() {
        let params = random_params(2);
        let p = problem();
        let mut rng = stream_rng(2, "s", 0);
        let y = params.sample_solution(&p, 1.0, &mut rng);
        let total = params.solution_logprob(&p, &y).unwrap();
        let head = params.step_logprob(&p, &[], y.step(0).unwrap()).unwrap();
        let tail: f64 = (1..y.len())
            .map(|i| params.step_logprob(&p, &y.steps[..i], y.step(i).unwrap()).unwrap())
            .sum();
        assert!((total - (head + tail)).abs() < 1e-12);

        // path probability by walking the tree equals exp(logprob)
        let mut prob = 1.0;
        for (i, &v) in y.steps.iter().enumerate() {
            let dist = params.step_probs(&p, &y.steps[..i]);
            prob *= dist.iter().find(|d| d.0 == v).unwrap().1;
        }
        assert!((prob.ln() - total).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = problem();
        let eps = 1e-5;
        for seed in 0..20 {
            let params = random_params(seed);
            let mut rng = stream_rng(seed, "y", 0);
            let y = params.sample_solution(&p, 1.0, &mut rng);
            for s in y.iter_steps() {
                let prefix = &y.steps[..s.index];
                let g = params.grad_step_logprob(&p, prefix, s).unwrap();
                assert!(g.sum().abs() < 1e-12);
                for (i, gi) in g.iter() {
                    let mut plus = params.clone();
                    plus.theta[i] += eps;
                    let mut minus = params.clone();
                    minus.theta[i] -= eps;
                    let fd = (plus.step_logprob(&p, prefix, s).unwrap()
                        - minus.step_logprob(&p, prefix, s).unwrap())
                        / (2.0 * eps);
                    assert!((fd - gi).abs() < 1e-6, "coord {i}: {fd} vs {gi}");
                }
            }
        }
    }

    #[test]
    fn uniform_two_way_gradient() {
        let params = PolicyParams::uniform(FeatureMap::new(7, 3, 2));
        let p = problem();
        let cands = params.candidate_logits(&p, &[]).unwrap();
        let g = params
            .grad_step_logprob(&p, &[], Step { index: 0, claimed_value: cands[0].0 })
            .unwrap();
        assert_eq!(g.get(cands[0].1), 0.5);
        assert_eq!(g.get(cands[1].1), -0.5);
    }

    #[test]
    fn sampling_is_seeded_and_cold_limit_is_greedy() {
        let params = random_params(5);
        let cfg = GeneratorConfig {
            modulus: 7,
            depth: 3,
            ..GeneratorConfig::default()
        };
        for seed in 0..20 {
            let p = generate_problem(seed, &cfg).unwrap();
            let a = params.sample_solution(&p, 0.8, &mut stream_rng(seed, "a", 0));
            let b = params.sample_solution(&p, 0.8, &mut stream_rng(seed, "a", 0));
            assert_eq!(a, b);
            let cold = params.sample_solution(&p, 1e-4, &mut stream_rng(seed, "c", 0));
            assert_eq!(cold, params.greedy_decode(&p));
        }
    }

    #[test]
    fn greedy_breaks_ties_by_lowest_index() {
        let params = PolicyParams::uniform(map());
        let p = problem();
        let y = params.greedy_decode(&p);
        let first = params.candidate_logits(&p, &[]).unwrap()[0].0;
        assert_eq!(y.steps[0], first);
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_params() {
        let mut params = random_params(9);
        let before = params.clone();
        apply_gradient(&mut params, &SparseGrad::new(), 0.3).unwrap();
        assert_eq!(params, before);
        let g: SparseGrad = [(3usize, 1.5), (10, -2.0)].into_iter().collect();
        apply_gradient(&mut params, &g, 0.0).unwrap();
        assert_eq!(params, before);
        let bad: SparseGrad = [(4usize, f64::NAN)].into_iter().collect();
        assert_eq!(
            apply_gradient(&mut params, &bad, 0.1),
            Err(PolicyError::NonFiniteGradient { index: 4 })
        );
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut params = PolicyParams::uniform(map());
        let mut opt = Optimizer::new(
            OptimizerKind::AdamW {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
            params.theta.len(),
        );
        let g: SparseGrad = [(0usize, 2.0), (1, -0.5)].into_iter().collect();
        opt.step(&mut params, &g, 0.1).unwrap();
        assert!((params.theta[0] + 0.1).abs() < 1e-6);
        assert!((params.theta[1] - 0.1).abs() < 1e-6);
        assert_eq!(params.theta[2], 0.0);
    }

    #[test]
    fn reference_is_a_snapshot() {
        let mut params = random_params(4);
        let reference = ReferencePolicy::freeze(&params);
        let before = reference.theta.clone();
        params.theta[0] += 1.0;
        assert_eq!(reference.theta, before);
    }
}
