use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use stepdpo::harness::{ExperimentConfig, Stages};

#[derive(Parser)]
#[command(name = "stepdpo", version, about = "Step-reward weighted DPO lab on chain arithmetic")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// TOML config file; defaults apply to missing keys only when the file
    /// is absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a config key, e.g. `--set dpo.gamma=1.0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as TOML.
    Config,
    GenProblems,
    /// Fit the warm-start policy to noisy demonstrations.
    SftInit,
    BuildPrmData,
    TrainPrm,
    BuildPairs,
    TrainDpo,
    /// Accuracy of the warm-start and tuned policies under every strategy.
    Eval,
    /// Run every stage in order.
    Run,
    SweepGamma {
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1,2,4")]
        values: Vec<f64>,
    },
    SweepN {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8")]
        values: Vec<usize>,
        /// Samples per problem for best-of-N scoring.
        #[arg(long, default_value_t = 15)]
        bon_samples: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = base.with_overrides(&overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let stages = Stages::new(&cfg, &cli.common.out)?;
    match cli.command {
        Command::Config => unreachable!(),
        Command::GenProblems => {
            let set = stages.gen_problems()?;
            println!("problems: sft={} train={} eval={}", set.sft.len(), set.train.len(), set.eval.len());
        }
        Command::SftInit => {
            stages.sft_init()?;
            println!("warm-start policy written");
        }
        Command::BuildPrmData => {
            let data = stages.build_prm_data()?;
            println!(
                "prm examples: {} (label_evals={} rollouts={})",
                data.examples.len(),
                data.cost.label_evals,
                data.cost.rollouts
            );
        }
        Command::TrainPrm => {
            stages.train_prm()?;
            println!("prm written");
        }
        Command::BuildPairs => {
            let (_, stats) = stages.build_pairs()?;
            println!(
                "pairs: {} from {} problems ({} without a correct sample, {} without an incorrect one)",
                stats.pairs, stats.problems, stats.skipped_no_correct, stats.skipped_no_incorrect
            );
        }
        Command::TrainDpo => {
            stages.train_dpo()?;
            println!("policy written");
        }
        Command::Eval | Command::Run => {
            let report = if let Command::Run = cli.command {
                stages.run_all()?
            } else {
                stages.eval()?
            };
            println!("{:<8} {:>10} {:>10}", "strategy", "sft", "dpo");
            for ((s, a), (_, b)) in report.sft.iter().zip(&report.dpo) {
                println!("{s:<8} {a:>10.4} {b:>10.4}");
            }
        }
        Command::SweepGamma { values } => {
            println!("{:>6} {:>10}", "gamma", "greedy");
            for r in stages.sweep_gamma(&values)? {
                println!("{:>6} {:>10.4}", r.gamma, r.greedy_accuracy);
            }
        }
        Command::SweepN { values, bon_samples } => {
            println!("{:>3} {:>12} {:>10}", "N", "label_evals", "bon");
            for r in stages.sweep_n(&values, bon_samples)? {
                println!("{:>3} {:>12} {:>10.4}", r.n, r.label_evals, r.bon_accuracy);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
