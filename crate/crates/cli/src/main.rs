//! `dgr`: run experiments, grid searches and evaluation checks from a TOML
//! config. Exit status is 0 on success, 1 for configuration problems and 2
//! for runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use dgr_core::evaluation::{theorem_trend_check, TrendFamily, TrendResult};
use dgr_core::experiment::{
    aggregate, grid_search, read_seed_reports, run_experiment, write_grid, write_run, write_summary_csv, Aggregate,
    ExperimentConfig, ExperimentRun, DEFAULT_LAMBDAS,
};

#[derive(Parser)]
#[command(name = "dgr", version, about = "Dummy gradient-norm regularization for multi-task learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Penalty weight(s), comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lambda: Vec<f64>,
    /// Worker threads for independent seeds.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train baselines and the multi-task model for every seed and write a report.
    Train(RunArgs),
    /// Run one experiment per lambda and pick the best mean relative improvement.
    Grid(RunArgs),
    /// Like `train`, with universality evaluation switched on.
    Universality(RunArgs),
    /// Like `train`, with the kNN probe switched on.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        /// Neighbours; defaults to the config value or 5.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Correlate universality with the inverse dummy gradient norm over random encoders.
    Trend {
        /// Optional config supplying `evaluation.trend`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-aggregate the per-seed files of a finished run.
    Report {
        /// Directory holding `seed_<i>.json` files.
        dir: PathBuf,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    /// Sorts a core error by whether a config change would fix it.
    fn from_core(e: dgr_core::Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load(args: &RunArgs) -> std::result::Result<(ExperimentConfig, PathBuf), Failure> {
    let mut cfg = ExperimentConfig::load(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))
        .map_err(Failure::Config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if args.jobs == 0 {
        return Err(Failure::Config(anyhow!("--jobs must be at least 1")));
    }
    let out = args.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("dgr-out"));
    Ok((cfg, out))
}

fn single_lambda(cfg: &mut ExperimentConfig, lambdas: &[f64]) -> std::result::Result<(), Failure> {
    match lambdas {
        [] => {}
        [l] => cfg.train.dgr.lambda = *l,
        _ => return Err(Failure::Config(anyhow!("--lambda: this command takes one value; use `grid` for a list"))),
    }
    cfg.validate().map_err(Failure::from_core)
}

fn print_aggregate(agg: &Aggregate) {
    println!("{:<16} {:>12} {:>12} {:>12}", "task", "baseline", "multitask", "std");
    for t in &agg.tasks {
        println!("{:<16} {:>12.6} {:>12.6} {:>12.6}", t.task_id, t.baseline_mean, t.mtl_mean, t.mtl_std);
    }
    println!("delta_mtl {:+.4}% (std {:.4}, {} seeds)", agg.delta_mtl_mean, agg.delta_mtl_std, agg.num_seeds);
}

fn run_and_write(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> std::result::Result<ExperimentRun, Failure> {
    let run = run_experiment(cfg, jobs).map_err(Failure::from_core)?;
    write_run(&run, out).map_err(|e| Failure::Runtime(e.into()))?;
    print_aggregate(&run.report.aggregate);
    println!("wrote {}", out.display());
    Ok(run)
}

fn train(args: &RunArgs) -> Outcome {
    let (mut cfg, out) = load(args)?;
    single_lambda(&mut cfg, &args.lambda)?;
    run_and_write(&cfg, &out, args.jobs).map(|_| ())
}

fn grid(args: &RunArgs) -> Outcome {
    let (cfg, out) = load(args)?;
    let lambdas = if args.lambda.is_empty() { DEFAULT_LAMBDAS.to_vec() } else { args.lambda.clone() };
    let g = grid_search(&cfg, &lambdas, args.jobs).map_err(Failure::from_core)?;
    write_grid(&g, &out).map_err(|e| Failure::Runtime(e.into()))?;
    println!("{:>10} {:>14} {:>10}", "lambda", "delta_mtl %", "std");
    for r in &g.rows {
        let mark = if r.lambda == g.best_lambda { " *" } else { "" };
        println!("{:>10e} {:>+14.4} {:>10.4}{mark}", r.lambda, r.delta_mtl_mean, r.delta_mtl_std);
    }
    println!("best lambda {:e}; wrote {}", g.best_lambda, out.display());
    Ok(())
}

fn universality(args: &RunArgs) -> Outcome {
    let (mut cfg, out) = load(args)?;
    cfg.evaluation.universality = true;
    single_lambda(&mut cfg, &args.lambda)?;
    let run = run_and_write(&cfg, &out, args.jobs)?;
    println!("{:>6} {:<16} {:>6} {:>14} {:>14} {:>14} {:>6}", "seed", "task", "dummy", "dummy_loss", "optimal_loss", "U", "degen");
    for s in &run.report.seeds {
        for e in s.universality.iter().flatten() {
            let r = &e.report;
            println!(
                "{:>6} {:<16} {:>6} {:>14.6} {:>14.6} {:>14.6e} {:>6}",
                s.seed, r.task_id, e.dummy, r.dummy_loss_min_perm, r.optimal_loss, r.u, r.degenerate
            );
        }
    }
    Ok(())
}

fn probe(args: &RunArgs, k: Option<usize>) -> Outcome {
    let (mut cfg, out) = load(args)?;
    cfg.evaluation.probe_k = Some(k.or(cfg.evaluation.probe_k).unwrap_or(5));
    single_lambda(&mut cfg, &args.lambda)?;
    let run = run_and_write(&cfg, &out, args.jobs)?;
    println!("{:>6} {:<16} {:>12}", "seed", "task", "probe");
    for s in &run.report.seeds {
        for p in s.probe.iter().flatten() {
            println!("{:>6} {:<16} {:>12.6}", s.seed, p.task_id, p.metric);
        }
    }
    Ok(())
}

fn trend(config: Option<&Path>, samples: usize, seed: u64, out: Option<&Path>) -> Outcome {
    let family = match config {
        Some(p) => {
            ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display())).map_err(Failure::Config)?.evaluation.trend
        }
        None => TrendFamily::default(),
    };
    let r: TrendResult = theorem_trend_check(&family, samples, seed).map_err(|e| match e {
        dgr_core::Error::UndefinedCorrelation(_) if samples < 3 => Failure::Config(e.into()),
        e => Failure::from_core(e),
    })?;
    println!("spearman {:.4} over {} encoders ({} degenerate excluded)", r.rho, r.used, r.excluded_degenerate);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).and_then(|_| {
            let text = serde_json::to_string_pretty(&r).map_err(std::io::Error::other)?;
            std::fs::write(dir.join("trend.json"), text + "\n")
        })
        .map_err(|e| Failure::Runtime(e.into()))?;
        println!("wrote {}", dir.join("trend.json").display());
    }
    Ok(())
}

fn report(dir: &Path) -> Outcome {
    let seeds = read_seed_reports(dir).map_err(|e| Failure::Config(e.into()))?;
    let agg = aggregate(&seeds).map_err(|e| Failure::Config(e.into()))?;
    let text = serde_json::to_string_pretty(&agg).map_err(|e| Failure::Runtime(e.into()))? + "\n";
    std::fs::write(dir.join("aggregate.json"), text).map_err(|e| Failure::Runtime(e.into()))?;
    write_summary_csv(&seeds, &agg, &dir.join("summary.csv")).map_err(|e| Failure::Runtime(e.into()))?;
    print_aggregate(&agg);
    Ok(())
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
    let outcome = match &cli.command {
        Command::Train(a) => train(a),
        Command::Grid(a) => grid(a),
        Command::Universality(a) => universality(a),
        Command::Probe { run, k } => probe(run, *k),
        Command::Trend { config, samples, seed, out } => trend(config.as_deref(), *samples, *seed, out.as_deref()),
        Command::Report { dir } => report(dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
