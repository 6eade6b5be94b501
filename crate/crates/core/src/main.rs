use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rhm_lab::config::RunConfig;
use rhm_lab::pipeline::{self, RunDir};
use rhm_lab::task::EvalCondition;
use rhm_lab::Error;

#[derive(Parser, Debug)]
#[command(
    name = "rhm-lab",
    version,
    about = "Train and probe transformers on Random Hierarchy Model grammars"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing artifacts.
    #[arg(long)]
    force: bool,
    /// Seed for the grammar, the split and training.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the grammar and write its rule tables.
    GenGrammar(Common),
    /// Write each condition's sequences as JSONL.
    DumpDataset(Common),
    /// Write encoded evaluation episodes of one condition as JSONL.
    DumpEpisodes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        condition: EvalCondition,
    },
    /// Train from scratch, writing checkpoints and the metrics log.
    Train(Common),
    /// Score a checkpoint and append to eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: u64,
        /// Every available condition when omitted.
        #[arg(long)]
        condition: Option<EvalCondition>,
        /// Demonstrations per episode; the training value when omitted.
        #[arg(long)]
        n_ct: Option<usize>,
    },
    /// Specialization, PCA and head clusters for every checkpoint.
    Analyze(Common),
    /// Bayes-optimal accuracy ceilings per condition.
    Oracle(Common),
    /// gen-grammar, oracle, train and analyze in sequence.
    Run(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenGrammar(c) | Command::DumpDataset(c) | Command::Train(c) => c,
            Command::Analyze(c) | Command::Oracle(c) | Command::Run(c) => c,
            Command::DumpEpisodes { common, .. } | Command::Eval { common, .. } => common,
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parameter(_)) => 2,
        Some(Error::MissingArtifact(_)) => 3,
        Some(Error::NonFinite { .. }) => 4,
        _ => 1,
    }
}

fn print_row(row: &rhm_lab::train::MetricsRow) {
    if row.acc_mem.is_some() || row.acc_ind.is_some() {
        eprintln!("{}", row.to_csv());
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Ok(n) = std::env::var("RHM_LAB_THREADS") {
        let n: usize = n.parse().context("RHM_LAB_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let common = cli.command.common();
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    let dir = RunDir::resolve(&cfg, common.out.as_deref());
    let force = common.force;
    match &cli.command {
        Command::GenGrammar(_) => {
            let path = pipeline::gen_grammar(&cfg, &dir, force)?;
            println!("{}", path.display());
        }
        Command::DumpDataset(_) => {
            for path in pipeline::dump_dataset(&cfg, &dir, force)? {
                println!("{}", path.display());
            }
        }
        Command::DumpEpisodes { condition, .. } => {
            println!("{}", pipeline::dump_episodes(&cfg, &dir, *condition, force)?.display());
        }
        Command::Train(_) => {
            let out = pipeline::run_train(&cfg, &dir, force, Some(Box::new(print_row)))?;
            println!(
                "{} checkpoints in {}",
                out.checkpoints.len(),
                dir.checkpoints().display()
            );
        }
        Command::Eval {
            checkpoint,
            condition,
            n_ct,
            ..
        } => {
            let conditions: Vec<EvalCondition> = condition.iter().copied().collect();
            for row in pipeline::run_eval(&cfg, &dir, *checkpoint, &conditions, *n_ct)? {
                let a = row.accuracy;
                println!(
                    "step {} {} n_ct {}: {:.4} [{:.4}, {:.4}] over {}",
                    row.step, row.condition, row.n_ct, a.accuracy, a.lo, a.hi, a.n
                );
            }
        }
        Command::Analyze(_) => {
            let results = pipeline::run_analyze(&cfg, &dir, force)?;
            for r in &results {
                println!("step {}: specialization {:.4}", r.step, r.overall_mean());
            }
        }
        Command::Oracle(_) => {
            let row = pipeline::run_oracle(&cfg, &dir, force)?;
            println!("{}", row.to_csv());
        }
        Command::Run(_) => {
            pipeline::gen_grammar(&cfg, &dir, force)?;
            let oracle = pipeline::run_oracle(&cfg, &dir, force)?;
            println!("oracle {}", oracle.to_csv());
            pipeline::run_train(&cfg, &dir, force, Some(Box::new(print_row)))?;
            pipeline::run_analyze(&cfg, &dir, force)?;
            println!("{}", dir.root.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
