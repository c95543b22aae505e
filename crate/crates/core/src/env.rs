//! Synthetic chain-arithmetic reasoning tasks.
//!
//! A [`Problem`] is a start value and an ordered list of modular operations.
//! A [`Solution`] claims one intermediate value per operation; the last claim is
//! the answer. One operation is one reasoning step, so every per-step quantity
//! (labels, rewards, weights) is defined exactly.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{stream_rng, StreamRng};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("solution for problem {solution} checked against problem {problem}")]
    ProblemMismatch { solution: u64, problem: u64 },
    #[error("solution has {got} steps, problem has {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("state space of {size} exceeds enumeration bound {bound}")]
    StateSpaceTooLarge { size: f64, bound: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Add,
    Sub,
    Mul,
}

impl OpKind {
    pub const ALL: [OpKind; 3] = [OpKind::Add, OpKind::Sub, OpKind::Mul];

    pub fn index(self) -> usize {
        match self {
            OpKind::Add => 0,
            OpKind::Sub => 1,
            OpKind::Mul => 2,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
        })
    }
}

/// One modular operation, serialized as `["add", 4]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(OpKind, u32)", into = "(OpKind, u32)")]
pub struct Op {
    pub kind: OpKind,
    pub operand: u32,
}

impl From<(OpKind, u32)> for Op {
    fn from((kind, operand): (OpKind, u32)) -> Self {
        Op { kind, operand }
    }
}

impl From<Op> for (OpKind, u32) {
    fn from(op: Op) -> Self {
        (op.kind, op.operand)
    }
}

impl Op {
    pub fn new(kind: OpKind, operand: u32) -> Self {
        Op { kind, operand }
    }

    pub fn apply(self, value: u32, modulus: u32) -> u32 {
        let (v, c, m) = (u64::from(value), u64::from(self.operand), u64::from(modulus));
        let out = match self.kind {
            OpKind::Add => (v + c) % m,
            OpKind::Sub => (v + m - c % m) % m,
            OpKind::Mul => (v * c) % m,
        };
        out as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: u64,
    #[serde(rename = "start")]
    pub start_value: u32,
    pub ops: Vec<Op>,
    #[serde(rename = "V")]
    pub modulus: u32,
}

/// The decision point before step `index`: which value the chain currently
/// holds and which operation comes next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct State {
    pub index: usize,
    pub prev_value: u32,
    pub op: Op,
    pub modulus: u32,
}

impl State {
    /// The value a correct step claims from this state.
    pub fn true_next(&self) -> u32 {
        self.op.apply(self.prev_value, self.modulus)
    }
}

impl Problem {
    pub fn depth(&self) -> usize {
        self.ops.len()
    }

    /// State reached after the claimed values in `prefix`, or `None` once the
    /// chain is complete.
    pub fn state_after(&self, prefix: &[u32]) -> Option<State> {
        let index = prefix.len();
        let op = *self.ops.get(index)?;
        Some(State {
            index,
            prev_value: prefix.last().copied().unwrap_or(self.start_value),
            op,
            modulus: self.modulus,
        })
    }

    /// True intermediate values, one per op.
    pub fn gold_trace(&self) -> Vec<u32> {
        self.ops
            .iter()
            .scan(self.start_value, |v, op| {
                *v = op.apply(*v, self.modulus);
                Some(*v)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.modulus < 2 {
            return Err(EnvError::Config(format!("modulus {} < 2", self.modulus)));
        }
        if self.ops.is_empty() {
            return Err(EnvError::Config("problem has no ops".into()));
        }
        if self.start_value >= self.modulus {
            return Err(EnvError::Config(format!(
                "start {} outside [0, {})",
                self.start_value, self.modulus
            )));
        }
        if let Some(op) = self.ops.iter().find(|op| op.operand == 0 || op.operand >= self.modulus) {
            return Err(EnvError::Config(format!(
                "operand {} outside [1, {})",
                op.operand, self.modulus
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub index: usize,
    pub claimed_value: u32,
}

/// A candidate step chain. Steps are stored as claimed values; the step index
/// is the position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Solution {
    pub problem_id: u64,
    pub steps: Vec<u32>,
}

impl Solution {
    pub fn new(problem_id: u64, steps: Vec<u32>) -> Self {
        Solution { problem_id, steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Claimed value of the final step.
    pub fn answer(&self) -> Option<u32> {
        self.steps.last().copied()
    }

    pub fn step(&self, index: usize) -> Option<Step> {
        self.steps.get(index).map(|&claimed_value| Step { index, claimed_value })
    }

    pub fn iter_steps(&self) -> impl Iterator<Item = Step> + '_ {
        self.steps
            .iter()
            .enumerate()
            .map(|(index, &claimed_value)| Step { index, claimed_value })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// All arithmetic is modulo this value.
    pub modulus: u32,
    /// Number of ops (and therefore steps) per problem.
    pub depth: usize,
    pub op_kinds: Vec<OpKind>,
    /// Operands are drawn from `1..=max_operand`, clamped to `modulus - 1`.
    pub max_operand: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            modulus: 7,
            depth: 4,
            op_kinds: OpKind::ALL.to_vec(),
            max_operand: 6,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.modulus < 2 {
            return Err(EnvError::Config(format!("V = {} < 2", self.modulus)));
        }
        if self.depth < 1 {
            return Err(EnvError::Config("D = 0".into()));
        }
        if self.op_kinds.is_empty() {
            return Err(EnvError::Config("empty op set".into()));
        }
        if self.max_operand < 1 {
            return Err(EnvError::Config("max_operand = 0".into()));
        }
        Ok(())
    }

    fn operand_limit(&self) -> u32 {
        self.max_operand.min(self.modulus - 1)
    }
}

/// Draw a problem from `seed`. The seed doubles as the problem id.
pub fn generate_problem(seed: u64, cfg: &GeneratorConfig) -> Result<Problem, EnvError> {
    cfg.validate()?;
    let mut rng: StreamRng = stream_rng(seed, "problem", 0);
    let start_value = rng.gen_range(0..cfg.modulus);
    let ops = (0..cfg.depth)
        .map(|_| {
            let kind = cfg.op_kinds[rng.gen_range(0..cfg.op_kinds.len())];
            Op::new(kind, rng.gen_range(1..=cfg.operand_limit()))
        })
        .collect();
    Ok(Problem {
        id: seed,
        start_value,
        ops,
        modulus: cfg.modulus,
    })
}

/// `count` problems with ids `first_id..first_id + count`, each drawn from its
/// own stream under `master_seed`.
pub fn generate_suite(
    master_seed: u64,
    label: &str,
    first_id: u64,
    count: usize,
    cfg: &GeneratorConfig,
) -> Result<Vec<Problem>, EnvError> {
    (0..count as u64)
        .map(|i| {
            let seed = crate::seed::stream_seed(master_seed, label, i);
            let mut p = generate_problem(seed, cfg)?;
            p.id = first_id + i;
            Ok(p)
        })
        .collect()
}

pub fn gold_answer(p: &Problem) -> u32 {
    p.ops
        .iter()
        .fold(p.start_value, |v, op| op.apply(v, p.modulus))
}

/// Outcome check on the final answer only; intermediate steps are ignored.
pub fn check_answer(s: &Solution, p: &Problem) -> Result<bool, EnvError> {
    if s.problem_id != p.id {
        return Err(EnvError::ProblemMismatch {
            solution: s.problem_id,
            problem: p.id,
        });
    }
    if s.len() != p.depth() {
        return Err(EnvError::LengthMismatch {
            got: s.len(),
            expected: p.depth(),
        });
    }
    Ok(s.answer() == Some(gold_answer(p)))
}

/// Anything that defines a distribution over the next claimed value.
pub trait StepSampler {
    /// Candidate next values with their probabilities at the state reached by
    /// `prefix`. Probabilities sum to one.
    fn step_probs(&self, problem: &Problem, prefix: &[u32]) -> Vec<(u32, f64)>;

    fn sample_step<R: Rng + ?Sized>(&self, problem: &Problem, prefix: &[u32], rng: &mut R) -> u32 {
        let probs = self.step_probs(problem, prefix);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(value, p) in &probs {
            acc += p;
            if u < acc {
                return value;
            }
        }
        // rounding left u above the final cumulative sum
        probs
            .iter()
            .rev()
            .find(|(_, p)| *p > 0.0)
            .map(|(v, _)| *v)
            .expect("step distribution has no support")
    }

    /// Continue `prefix` to a full chain.
    fn complete<R: Rng + ?Sized>(&self, problem: &Problem, prefix: &[u32], rng: &mut R) -> Vec<u32> {
        let mut chain = prefix.to_vec();
        while chain.len() < problem.depth() {
            let next = self.sample_step(problem, &chain, rng);
            chain.push(next);
        }
        chain
    }
}

/// Exact probability that continuing `prefix` under `sampler` ends at the gold
/// answer, by walking the whole continuation tree.
///
/// Refuses when `V^(remaining depth)` exceeds `max_states`.
pub fn enumerate_success_prob<S: StepSampler + ?Sized>(
    sampler: &S,
    p: &Problem,
    prefix: &[u32],
    max_states: f64,
) -> Result<f64, EnvError> {
    let remaining = p.depth().saturating_sub(prefix.len());
    let size = f64::from(p.modulus).powi(remaining as i32);
    if size > max_states {
        return Err(EnvError::StateSpaceTooLarge {
            size,
            bound: max_states,
        });
    }
    let gold = gold_answer(p);
    let mut chain = prefix.to_vec();
    Ok(walk(sampler, p, &mut chain, gold))
}

fn walk<S: StepSampler + ?Sized>(sampler: &S, p: &Problem, chain: &mut Vec<u32>, gold: u32) -> f64 {
    if chain.len() >= p.depth() {
        return if chain.last() == Some(&gold) { 1.0 } else { 0.0 };
    }
    let mut total = 0.0;
    for (value, prob) in sampler.step_probs(p, chain) {
        if prob == 0.0 {
            continue;
        }
        chain.push(value);
        total += prob * walk(sampler, p, chain, gold);
        chain.pop();
    }
    total
}
