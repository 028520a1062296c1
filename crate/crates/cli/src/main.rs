use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqcredit::harness::{self, ExperimentConfig, ExperimentId};

/// Credit-assignment experiments for sequential cooperative bandit teams.
#[derive(Parser, Debug)]
#[command(name = "seqcredit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-agent advantage MSE as a function of team size.
    MseVsK(RunArgs),
    /// Advantage MSE as a function of interaction strength.
    MseVsLambda(RunArgs),
    /// Budget-matched policy optimization across methods.
    Optim(RunArgs),
    /// CAPO versus its direct-effect-only ablation.
    Ablation(RunArgs),
    /// Property suites on small enumerable instances.
    TheoryCheck(RunArgs),
    /// Print the default configuration of an experiment as JSON.
    Defaults {
        experiment: String,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON config; keys not given keep the experiment defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; files go to <out>/<experiment>/.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long)]
    seeds: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    /// Override any config field, e.g. `train.m=2` or `k_grid=[2,4]`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(id: ExperimentId, args: RunArgs) -> Result<ExitCode, seqcredit::Error> {
    let mut overrides = args.overrides;
    if let Some(s) = args.seeds {
        overrides.push(format!("seeds={s}"));
    }
    if let Some(w) = args.workers {
        overrides.push(format!("workers={w}"));
    }
    if let Some(m) = args.master_seed {
        overrides.push(format!("master_seed={m}"));
    }
    let cfg = ExperimentConfig::load(id, args.config.as_deref(), &overrides)?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let outcome = harness::run(&cfg, &args.out)?;
    eprintln!("{} rows written to {}", outcome.rows.len(), outcome.dir.display());
    if let Some(report) = outcome.theory {
        for (name, _, cases, bad, _) in &report.checks {
            eprintln!("{:<24} {:>7} cases {:>4} violations", name, cases, bad);
        }
        if !report.passed() {
            eprintln!("theory check failed");
            return Ok(ExitCode::from(2));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::MseVsK(a) => run(ExperimentId::MseVsK, a),
        Command::MseVsLambda(a) => run(ExperimentId::MseVsLambda, a),
        Command::Optim(a) => run(ExperimentId::Optim, a),
        Command::Ablation(a) => run(ExperimentId::Ablation, a),
        Command::TheoryCheck(a) => run(ExperimentId::TheoryCheck, a),
        Command::Defaults { experiment } => experiment
            .parse::<ExperimentId>()
            .and_then(|id| ExperimentConfig::defaults(id).to_json_pretty())
            .map(|text| {
                println!("{text}");
                ExitCode::SUCCESS
            }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

