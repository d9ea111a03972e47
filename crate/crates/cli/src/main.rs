//! Command-line driver for the in-context game-playing experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use icgp_cli::config::ExperimentConfig;
use icgp_cli::pipeline::Pipeline;
use icgp_core::game::GameDims;
use icgp_core::realization::{verify_realization, verify_realization_perturbed};
use icgp_core::Result;

#[derive(Parser)]
#[command(name = "icgp", version, about = "Two-player zero-sum games played in context: \
collect expert trajectories, pretrain transformers, play fresh games, evaluate equilibrium gaps.")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// All four stages in order: collect, train, infer, eval.
    Run(PipelineArgs),
    /// Sample the pretraining dataset.
    Collect(PipelineArgs),
    /// Pretrain one model set per corpus size and training seed.
    Train(PipelineArgs),
    /// Play the baseline and every trained model on fresh inference games.
    Infer(PipelineArgs),
    /// Compute gap curves and write curves.csv / curves.svg.
    Eval(PipelineArgs),
    /// Verify the hand-constructed transformer weights against their
    /// direct implementations.
    RealizeCheck(RealizeArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Experiment description (flat key = value text).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides output_dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config's seed key.
    #[arg(long)]
    seed: Option<u64>,
    /// Round collected rewards to two decimals; overrides the config key.
    #[arg(long)]
    round2: bool,
}

#[derive(Args)]
struct RealizeArgs {
    #[arg(long, default_value_t = 2)]
    horizon: usize,
    #[arg(long, default_value_t = 2)]
    states: usize,
    #[arg(long, default_value_t = 3)]
    max_actions: usize,
    #[arg(long, default_value_t = 3)]
    min_actions: usize,
    /// Equilibrium-subroutine iterations realized by the stacked weights.
    #[arg(long, default_value_t = 50)]
    rounds: usize,
    /// Random staged instances per sub-step.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one weight first; the check must then fail (self-test).
    #[arg(long)]
    perturb: bool,
    /// Directory for realize-report.json (printed to stdout regardless).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn build_pipeline(args: &PipelineArgs) -> Result<Pipeline> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.round2 {
        cfg.round2 = true;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| icgp_core::Error::invalid("no output directory: pass --out or set output_dir in the config"))?;
    Pipeline::new(cfg, out)
}

fn run_pipeline_cmd(args: &PipelineArgs, stage: &str) -> Result<()> {
    let pipeline = build_pipeline(args)?;
    match stage {
        "run" => {
            for (name, outcome) in pipeline.run_all()? {
                println!("[{name}] {}", outcome.as_str());
            }
        }
        "collect" => println!("[collect] {}", pipeline.stage_collect()?.as_str()),
        "train" => println!("[train] {}", pipeline.stage_train()?.as_str()),
        "infer" => println!("[infer] {}", pipeline.stage_infer()?.as_str()),
        "eval" => println!("[eval] {}", pipeline.stage_eval()?.as_str()),
        other => unreachable!("unknown stage {other}"),
    }
    println!("artifacts in {}", pipeline.paths().root.display());
    Ok(())
}

fn run_realize_check(args: &RealizeArgs) -> Result<bool> {
    let dims = GameDims::new(args.horizon, args.states, args.max_actions, args.min_actions);
    let report = if args.perturb {
        verify_realization_perturbed(dims, args.rounds, args.trials, args.seed)?
    } else {
        verify_realization(dims, args.rounds, args.trials, args.seed)?
    };
    print!("{}", report.render());
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("realize-report.json");
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        println!("report written to {}", path.display());
    }
    // A perturbed run is a self-test of the checker: sub-steps are expected
    // to fail, and the exit code reports that failure.
    Ok(report.all_pass)
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("ICGP_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("warning: could not apply ICGP_THREADS={n}: {e}");
                }
            }
            _ => eprintln!("warning: ignoring invalid ICGP_THREADS={threads}"),
        }
    }
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run(a) => run_pipeline_cmd(a, "run").map(|()| true),
        Cmd::Collect(a) => run_pipeline_cmd(a, "collect").map(|()| true),
        Cmd::Train(a) => run_pipeline_cmd(a, "train").map(|()| true),
        Cmd::Infer(a) => run_pipeline_cmd(a, "infer").map(|()| true),
        Cmd::Eval(a) => run_pipeline_cmd(a, "eval").map(|()| true),
        Cmd::RealizeCheck(a) => run_realize_check(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
