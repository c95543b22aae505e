//! Experiment orchestration: configuration, the in-memory pipeline, on-disk
//! artifacts and the two sweep studies.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decode::{evaluate_accuracy, AccuracyReport, DecodeConfig, Strategy};
use crate::digest::{config_hash, hex_digest};
use crate::dpo::{train_full_step_dpo, BatchMetrics, DpoConfig};
use crate::env::{generate_suite, GeneratorConfig, Problem};
use crate::pairing::{build_pairs, PairRecord, PairingConfig, PreferencePair};
use crate::policy::{FeatureMap, PolicyParams, ReferencePolicy};
use crate::prm::{build_prm_dataset, train_prm, LabelCost, PrmDataset, PrmExample, PrmParams, PrmTrainConfig, SamplingBudget};
use crate::seed::stream_rng;
use crate::sft::{sft_init, SftConfig};

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    /// Problems the warm-start demonstrations are drawn from.
    pub sft: usize,
    /// Problems used for PRM data and preference pairs.
    pub train: usize,
    pub eval: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Splits {
            sft: 3000,
            train: 1500,
            eval: 2000,
        }
    }
}

/// Every knob of a run. Serialized as TOML; see `README.md` for the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Candidate values per state.
    pub branching: usize,
    pub env: GeneratorConfig,
    pub splits: Splits,
    pub sft: SftConfig,
    pub budget: SamplingBudget,
    pub prm: PrmTrainConfig,
    pub pairing: PairingConfig,
    pub dpo: DpoConfig,
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2024,
            branching: 4,
            env: GeneratorConfig::default(),
            splits: Splits::default(),
            sft: SftConfig::default(),
            budget: SamplingBudget::default(),
            prm: PrmTrainConfig {
                epochs: 3,
                learning_rate: 0.2,
                ..PrmTrainConfig::default()
            },
            pairing: PairingConfig::default(),
            // batch-mean gradients carry a factor beta / K, so a tabular
            // policy needs a far larger step than the unit default
            dpo: DpoConfig {
                learning_rate: 300.0,
                ..DpoConfig::default()
            },
            // the PRM cannot see earlier errors, so with b2 > 1 the newest
            // step alone lets broken beams survive
            decode: DecodeConfig {
                beam_score: crate::decode::BeamScore::MinPrefix,
                ..DecodeConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn map(&self) -> FeatureMap {
        FeatureMap::new(self.env.modulus, self.env.depth, self.branching)
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if !(1..=self.env.modulus as usize).contains(&self.branching) {
            bail!("branching must lie in 1..=V");
        }
        self.sft.validate().map_err(anyhow::Error::msg)?;
        self.budget.validate()?;
        self.dpo.validate()?;
        self.decode.validate().map_err(anyhow::Error::msg)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Apply `key=value` overrides, where `key` is a dotted path such as
    /// `dpo.gamma` and `value` is a TOML literal (bare words are taken as
    /// strings).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .with_context(|| format!("override '{o}' is not key=value"))?;
            let value = parse_literal(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one item");
            let mut table = &mut doc;
            for part in parents {
                table = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .with_context(|| format!("'{part}' in '{key}' is not a table"))?;
            }
            table.insert(last.to_string(), value);
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .context("override produced an invalid config")?;
        Ok(cfg)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key v was written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSet {
    pub sft: Vec<Problem>,
    pub train: Vec<Problem>,
    pub eval: Vec<Problem>,
}

impl ProblemSet {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let env = &cfg.env;
        let s = &cfg.splits;
        Ok(ProblemSet {
            sft: generate_suite(cfg.seed, "problems-sft", 0, s.sft, env)?,
            train: generate_suite(cfg.seed, "problems-train", 1_000_000, s.train, env)?,
            eval: generate_suite(cfg.seed, "problems-eval", 2_000_000, s.eval, env)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairStats {
    pub problems: usize,
    pub pairs: usize,
    pub skipped_no_correct: usize,
    pub skipped_no_incorrect: usize,
}

// ----- stages -------------------------------------------------------------

pub fn stage_sft(cfg: &ExperimentConfig, problems: &ProblemSet) -> Result<PolicyParams> {
    sft_init(cfg.map(), &problems.sft, &cfg.sft, cfg.seed).map_err(anyhow::Error::msg)
}

pub fn stage_prm_data(
    cfg: &ExperimentConfig,
    budget: &SamplingBudget,
    policy: &PolicyParams,
    problems: &ProblemSet,
) -> Result<PrmDataset> {
    Ok(build_prm_dataset(policy, &problems.train, budget, cfg.seed)?)
}

pub fn stage_train_prm(
    cfg: &ExperimentConfig,
    problems: &ProblemSet,
    data: &[PrmExample],
) -> Result<PrmParams> {
    let prm_cfg = PrmTrainConfig {
        seed: cfg.seed,
        ..cfg.prm
    };
    Ok(train_prm(cfg.map(), &problems.train, data, &prm_cfg)?.0)
}

pub fn stage_pairs(
    cfg: &ExperimentConfig,
    policy: &PolicyParams,
    prm: &PrmParams,
    problems: &ProblemSet,
) -> Result<(Vec<PreferencePair>, PairStats)> {
    let builds = problems
        .train
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream_rng(cfg.seed, "pairs", i as u64);
            build_pairs(policy, prm, p, &cfg.budget, &cfg.pairing, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut stats = PairStats {
        problems: builds.len(),
        ..PairStats::default()
    };
    let mut pairs = Vec::new();
    for b in builds {
        match b.skipped {
            Some(crate::pairing::SkipReason::NoCorrect) => stats.skipped_no_correct += 1,
            Some(crate::pairing::SkipReason::NoIncorrect) => stats.skipped_no_incorrect += 1,
            None => {}
        }
        pairs.extend(b.pairs);
    }
    stats.pairs = pairs.len();
    Ok((pairs, stats))
}

pub fn stage_dpo(
    dpo: &DpoConfig,
    policy: &PolicyParams,
    problems: &ProblemSet,
    pairs: &[PreferencePair],
) -> Result<(PolicyParams, Vec<BatchMetrics>)> {
    // the reference is the policy as it stands right before preference tuning
    let reference = ReferencePolicy::freeze(policy);
    let out = train_full_step_dpo(policy, &reference, &problems.train, pairs, dpo)?;
    Ok((out.policy, out.history))
}

pub fn stage_eval(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    decode: &DecodeConfig,
    policy: &PolicyParams,
    prm: Option<&PrmParams>,
    problems: &ProblemSet,
) -> Result<AccuracyReport> {
    Ok(evaluate_accuracy(strategy, policy, prm, &problems.eval, decode, cfg.seed)?)
}

/// Everything a full run produces, kept in memory.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub problems: ProblemSet,
    pub sft_policy: PolicyParams,
    pub prm_data: PrmDataset,
    pub prm: PrmParams,
    pub pairs: Vec<PreferencePair>,
    pub pair_stats: PairStats,
    pub policy: PolicyParams,
    pub dpo_history: Vec<BatchMetrics>,
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let problems = ProblemSet::generate(cfg)?;
    let sft_policy = stage_sft(cfg, &problems)?;
    let prm_data = stage_prm_data(cfg, &cfg.budget, &sft_policy, &problems)?;
    let prm = stage_train_prm(cfg, &problems, &prm_data.examples)?;
    let (pairs, pair_stats) = stage_pairs(cfg, &sft_policy, &prm, &problems)?;
    let (policy, dpo_history) = stage_dpo(&cfg.dpo, &sft_policy, &problems, &pairs)?;
    Ok(PipelineRun {
        problems,
        sft_policy,
        prm_data,
        prm,
        pairs,
        pair_stats,
        policy,
        dpo_history,
    })
}

// ----- sweeps -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub greedy_accuracy: f64,
    pub final_loss: f64,
    pub final_margin: f64,
}

/// Train one policy per `gamma` from the same warm start and pairs and report
/// greedy accuracy on the eval split.
pub fn sweep_gamma(
    cfg: &ExperimentConfig,
    problems: &ProblemSet,
    sft_policy: &PolicyParams,
    pairs: &[PreferencePair],
    gammas: &[f64],
) -> Result<Vec<GammaRow>> {
    gammas
        .iter()
        .map(|&gamma| {
            let dpo = DpoConfig { gamma, ..cfg.dpo };
            let (policy, history) = stage_dpo(&dpo, sft_policy, problems, pairs)?;
            let acc = stage_eval(cfg, Strategy::Greedy, &cfg.decode, &policy, None, problems)?;
            let last = history.last().copied();
            Ok(GammaRow {
                gamma,
                greedy_accuracy: acc.accuracy,
                final_loss: last.map_or(f64::NAN, |m| m.monitored_loss),
                final_margin: last.map_or(f64::NAN, |m| m.mean_margin),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NRow {
    pub n: usize,
    pub label_evals: u64,
    pub rollouts: u64,
    pub generated_steps: u64,
    pub bon_accuracy: f64,
}

/// Build PRM data with `N` rollouts per step for each `N` (0 is the
/// outcome-broadcast labeler), train a PRM on it and score best-of-N with
/// the warm-start policy.
pub fn sweep_n(
    cfg: &ExperimentConfig,
    problems: &ProblemSet,
    sft_policy: &PolicyParams,
    ns: &[usize],
    bon_samples: usize,
) -> Result<Vec<NRow>> {
    ns.iter()
        .map(|&n| {
            let budget = SamplingBudget { n, ..cfg.budget };
            let data = stage_prm_data(cfg, &budget, sft_policy, problems)?;
            let prm = stage_train_prm(cfg, problems, &data.examples)?;
            let decode = DecodeConfig {
                n_samples: bon_samples,
                ..cfg.decode
            };
            let acc = stage_eval(cfg, Strategy::BestOfN, &decode, sft_policy, Some(&prm), problems)?;
            let LabelCost {
                label_evals,
                rollouts,
                generated_steps,
            } = data.cost;
            Ok(NRow {
                n,
                label_evals,
                rollouts,
                generated_steps,
                bon_accuracy: acc.accuracy,
            })
        })
        .collect()
}

// ----- artifacts ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub version: u32,
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    /// Split sizes for `problems`, row counts elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<serde_json::Value>,
}

impl ArtifactHeader {
    pub fn new(cfg: &ExperimentConfig, kind: &str) -> Self {
        ArtifactHeader {
            version: ARTIFACT_VERSION,
            kind: kind.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            counts: None,
        }
    }
}

/// Artifact names inside an output directory.
pub mod names {
    pub const CONFIG: &str = "config.toml";
    pub const PROBLEMS: &str = "problems.jsonl";
    pub const SFT_POLICY: &str = "sft-policy.params";
    pub const PRM_DATA: &str = "prm-data.jsonl";
    pub const PRM: &str = "prm.params";
    pub const PAIRS: &str = "pairs.jsonl";
    pub const POLICY: &str = "policy.params";
    pub const DPO_METRICS: &str = "metrics/dpo.jsonl";
    pub const EVAL: &str = "metrics/eval.csv";
    pub const GAMMA: &str = "metrics/sweep-gamma.csv";
    pub const SWEEP_N: &str = "metrics/sweep-n.csv";
    pub const REPORT: &str = "report.json";
    /// Wall-clock measurements; the only output that differs between reruns.
    pub const TIMING: &str = "timing.csv";
}

/// Read and write versioned artifacts under one directory.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
}

fn header_line(h: &ArtifactHeader) -> Result<String> {
    Ok(serde_json::to_string(h)?)
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn create(&self, name: &str) -> Result<fs::File> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::File::create(&path).with_context(|| format!("writing {}", path.display()))
    }

    fn open(&self, name: &str) -> Result<BufReader<fs::File>> {
        let path = self.path(name);
        let f = fs::File::open(&path)
            .with_context(|| format!("missing artifact {} (run the upstream stage first)", path.display()))?;
        Ok(BufReader::new(f))
    }

    fn check_header(name: &str, line: Option<std::io::Result<String>>, kind: &str) -> Result<ArtifactHeader> {
        let line = line.with_context(|| format!("{name}: empty artifact"))??;
        let h: ArtifactHeader = serde_json::from_str(&line).with_context(|| format!("{name}: bad header"))?;
        if h.version != ARTIFACT_VERSION {
            bail!("{name}: artifact version {} (expected {ARTIFACT_VERSION})", h.version);
        }
        if h.kind != kind {
            bail!("{name}: artifact kind '{}' (expected '{kind}')", h.kind);
        }
        Ok(h)
    }

    pub fn write_jsonl<T: Serialize>(&self, name: &str, header: &ArtifactHeader, rows: &[T]) -> Result<()> {
        let mut f = std::io::BufWriter::new(self.create(name)?);
        writeln!(f, "{}", header_line(header)?)?;
        for r in rows {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, name: &str, kind: &str) -> Result<(ArtifactHeader, Vec<T>)> {
        let mut lines = self.open(name)?.lines();
        let h = Self::check_header(name, lines.next(), kind)?;
        let rows = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(&l?).with_context(|| format!("{name}: row {}", i + 1)))
            .collect::<Result<_>>()?;
        Ok((h, rows))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, header: &ArtifactHeader, body: &T) -> Result<()> {
        self.write_jsonl(name, header, std::slice::from_ref(body))
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str, kind: &str) -> Result<T> {
        let (_, mut rows) = self.read_jsonl::<T>(name, kind)?;
        if rows.len() != 1 {
            bail!("{name}: expected one body line, found {}", rows.len());
        }
        Ok(rows.remove(0))
    }

    /// CSV with a `#`-prefixed header comment line.
    pub fn write_csv<T: Serialize>(&self, name: &str, header: &ArtifactHeader, rows: &[T]) -> Result<()> {
        let mut f = self.create(name)?;
        writeln!(f, "# {}", header_line(header)?)?;
        let mut w = csv::Writer::from_writer(f);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Digest of every file under the root except the timing log, keyed by
    /// relative path.
    pub fn digests(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                let rel = path.strip_prefix(&self.root)?.to_string_lossy().replace('\\', "/");
                if rel != names::TIMING {
                    out.push((rel, hex_digest(&fs::read(&path)?)));
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProblemCounts {
    sft: usize,
    train: usize,
    eval: usize,
}

/// Which split a stored problem belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProblemRow {
    split: String,
    #[serde(flatten)]
    problem: Problem,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalRow {
    policy: String,
    strategy: String,
    n_samples: usize,
    b1: usize,
    b2: usize,
    seed: u64,
    correct: usize,
    total: usize,
    accuracy: f64,
}

impl EvalRow {
    fn new(policy: &str, r: &AccuracyReport) -> Self {
        EvalRow {
            policy: policy.to_string(),
            strategy: r.strategy.to_string(),
            n_samples: r.n_samples,
            b1: r.b1,
            b2: r.b2,
            seed: r.seed,
            correct: r.correct,
            total: r.total,
            accuracy: r.accuracy,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct TimingRow {
    stage: String,
    strategy: String,
    mean_wall_ms_per_problem: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub pairs: PairStats,
    pub prm_label_cost: LabelCost,
    /// Accuracy per strategy for the warm-start policy.
    pub sft: Vec<(String, f64)>,
    /// Accuracy per strategy for the preference-tuned policy.
    pub dpo: Vec<(String, f64)>,
}

/// Stage runner bound to an output directory.
pub struct Stages<'a> {
    pub cfg: &'a ExperimentConfig,
    pub store: ArtifactStore,
}

impl<'a> Stages<'a> {
    pub fn new(cfg: &'a ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let store = ArtifactStore::new(out);
        fs::create_dir_all(store.root())?;
        fs::write(store.path(names::CONFIG), cfg.to_toml()?)?;
        Ok(Stages { cfg, store })
    }

    fn header(&self, kind: &str) -> ArtifactHeader {
        ArtifactHeader::new(self.cfg, kind)
    }

    pub fn gen_problems(&self) -> Result<ProblemSet> {
        let set = ProblemSet::generate(self.cfg)?;
        let mut h = self.header("problems");
        h.counts = Some(serde_json::to_value(ProblemCounts {
            sft: set.sft.len(),
            train: set.train.len(),
            eval: set.eval.len(),
        })?);
        let rows: Vec<ProblemRow> = [("sft", &set.sft), ("train", &set.train), ("eval", &set.eval)]
            .into_iter()
            .flat_map(|(split, ps)| {
                ps.iter().map(move |p| ProblemRow {
                    split: split.to_string(),
                    problem: p.clone(),
                })
            })
            .collect();
        self.store.write_jsonl(names::PROBLEMS, &h, &rows)?;
        Ok(set)
    }

    pub fn load_problems(&self) -> Result<ProblemSet> {
        let (_, rows): (_, Vec<ProblemRow>) = self.store.read_jsonl(names::PROBLEMS, "problems")?;
        let mut set = ProblemSet {
            sft: Vec::new(),
            train: Vec::new(),
            eval: Vec::new(),
        };
        for r in rows {
            match r.split.as_str() {
                "sft" => set.sft.push(r.problem),
                "train" => set.train.push(r.problem),
                "eval" => set.eval.push(r.problem),
                other => bail!("{}: unknown split '{other}'", names::PROBLEMS),
            }
        }
        Ok(set)
    }

    pub fn sft_init(&self) -> Result<PolicyParams> {
        let problems = self.load_problems()?;
        let policy = stage_sft(self.cfg, &problems)?;
        self.store.write_json(names::SFT_POLICY, &self.header("policy"), &policy)?;
        Ok(policy)
    }

    fn load_policy(&self, name: &str) -> Result<PolicyParams> {
        let policy: PolicyParams = self.store.read_json(name, "policy")?;
        policy.check_shape()?;
        Ok(policy)
    }

    pub fn build_prm_data(&self) -> Result<PrmDataset> {
        let problems = self.load_problems()?;
        let policy = self.load_policy(names::SFT_POLICY)?;
        let data = stage_prm_data(self.cfg, &self.cfg.budget, &policy, &problems)?;
        let mut h = self.header("prm-data");
        h.counts = Some(serde_json::to_value(data.cost)?);
        self.store.write_jsonl(names::PRM_DATA, &h, &data.examples)?;
        Ok(data)
    }

    pub fn train_prm(&self) -> Result<PrmParams> {
        let problems = self.load_problems()?;
        let (_, data): (_, Vec<PrmExample>) = self.store.read_jsonl(names::PRM_DATA, "prm-data")?;
        let prm = stage_train_prm(self.cfg, &problems, &data)?;
        self.store.write_json(names::PRM, &self.header("prm"), &prm)?;
        Ok(prm)
    }

    fn load_prm(&self) -> Result<PrmParams> {
        self.store.read_json(names::PRM, "prm")
    }

    pub fn build_pairs(&self) -> Result<(Vec<PreferencePair>, PairStats)> {
        let problems = self.load_problems()?;
        let policy = self.load_policy(names::SFT_POLICY)?;
        let prm = self.load_prm()?;
        let (pairs, stats) = stage_pairs(self.cfg, &policy, &prm, &problems)?;
        let mut h = self.header("pairs");
        h.counts = Some(serde_json::to_value(stats)?);
        let rows: Vec<PairRecord> = pairs.iter().map(PairRecord::from).collect();
        self.store.write_jsonl(names::PAIRS, &h, &rows)?;
        Ok((pairs, stats))
    }

    fn load_pairs(&self) -> Result<(Vec<PreferencePair>, PairStats)> {
        let (h, rows): (_, Vec<PairRecord>) = self.store.read_jsonl(names::PAIRS, "pairs")?;
        let stats = match h.counts {
            Some(v) => serde_json::from_value(v)?,
            None => PairStats::default(),
        };
        Ok((rows.into_iter().map(PreferencePair::from).collect(), stats))
    }

    pub fn train_dpo(&self) -> Result<PolicyParams> {
        let problems = self.load_problems()?;
        let sft = self.load_policy(names::SFT_POLICY)?;
        let (pairs, _) = self.load_pairs()?;
        let (policy, history) = stage_dpo(&self.cfg.dpo, &sft, &problems, &pairs)?;
        self.store.write_jsonl(names::DPO_METRICS, &self.header("dpo-metrics"), &history)?;
        self.store.write_json(names::POLICY, &self.header("policy"), &policy)?;
        Ok(policy)
    }

    /// Evaluate the warm-start and tuned policies under every strategy and
    /// write the accuracy table and the run report.
    pub fn eval(&self) -> Result<Report> {
        let problems = self.load_problems()?;
        let sft = self.load_policy(names::SFT_POLICY)?;
        let policy = self.load_policy(names::POLICY)?;
        let prm = self.load_prm()?;
        let (_, pair_stats) = self.load_pairs()?;
        let (cost_header, _): (_, Vec<serde::de::IgnoredAny>) = self.store.read_jsonl(names::PRM_DATA, "prm-data")?;
        let prm_label_cost = match cost_header.counts {
            Some(v) => serde_json::from_value(v)?,
            None => LabelCost::default(),
        };

        let mut reports = Vec::new();
        for (who, pol) in [("sft", &sft), ("dpo", &policy)] {
            for s in Strategy::ALL {
                let r = stage_eval(self.cfg, s, &self.cfg.decode, pol, Some(&prm), &problems)?;
                reports.push((who, r));
            }
        }
        let rows: Vec<EvalRow> = reports.iter().map(|(who, r)| EvalRow::new(who, r)).collect();
        self.store.write_csv(names::EVAL, &self.header("eval"), &rows)?;
        let timing: Vec<TimingRow> = reports
            .iter()
            .map(|(who, r)| TimingRow {
                stage: format!("eval-{who}"),
                strategy: r.strategy.to_string(),
                mean_wall_ms_per_problem: r.mean_wall_ms,
            })
            .collect();
        let mut w = csv::Writer::from_path(self.store.path(names::TIMING))?;
        for t in timing {
            w.serialize(t)?;
        }
        w.flush()?;

        let pick = |who: &str| {
            reports
                .iter()
                .filter(|(w, _)| *w == who)
                .map(|(_, r)| (r.strategy.to_string(), r.accuracy))
                .collect()
        };
        let report = Report {
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            pairs: pair_stats,
            prm_label_cost,
            sft: pick("sft"),
            dpo: pick("dpo"),
        };
        let body = serde_json::to_string_pretty(&report)?;
        let mut f = fs::File::create(self.store.path(names::REPORT))?;
        writeln!(f, "{body}")?;
        Ok(report)
    }

    pub fn sweep_gamma(&self, gammas: &[f64]) -> Result<Vec<GammaRow>> {
        let problems = self.load_problems()?;
        let sft = self.load_policy(names::SFT_POLICY)?;
        let (pairs, _) = self.load_pairs()?;
        let rows = sweep_gamma(self.cfg, &problems, &sft, &pairs, gammas)?;
        self.store.write_csv(names::GAMMA, &self.header("sweep-gamma"), &rows)?;
        Ok(rows)
    }

    pub fn sweep_n(&self, ns: &[usize], bon_samples: usize) -> Result<Vec<NRow>> {
        let problems = self.load_problems()?;
        let sft = self.load_policy(names::SFT_POLICY)?;
        let rows = sweep_n(self.cfg, &problems, &sft, ns, bon_samples)?;
        self.store.write_csv(names::SWEEP_N, &self.header("sweep-n"), &rows)?;
        Ok(rows)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<Report> {
        self.gen_problems()?;
        self.sft_init()?;
        self.build_prm_data()?;
        self.train_prm()?;
        self.build_pairs()?;
        self.train_dpo()?;
        self.eval()
    }
}
