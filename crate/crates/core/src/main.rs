//! Command-line experiment runner.
//!
//! Exit codes: 0 success, 1 config error, 2 runtime abort, 3 I/O error.

use clap::{Args, Parser, Subcommand};
use fedbayes::aggregator::AggregatorKind;
use fedbayes::harness::{self, config, emit_reports, resummarize_curves, run_suite};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fedbayes", version, about = "Robust federated aggregation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment suite described by a config file.
    Run(RunArgs),
    /// Check a config file and report violations.
    Validate { config: PathBuf },
    /// Re-summarize an existing curves CSV.
    Table(TableArgs),
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Report directory (default: config run.out_dir, then $FEDBAYES_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the aggregator; repeatable to run several.
    #[arg(long = "aggregator")]
    aggregators: Vec<String>,
    /// Override the seed list; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Worker threads for (aggregator, seed) runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Suppress progress output.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct TableArgs {
    curves: PathBuf,
    /// Directory to write the recomputed summary into; prints to stdout
    /// when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, short)]
    quiet: bool,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_IO: u8 = 3;

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Validate { config } => validate(config),
        Command::Table(args) => table(args),
    }
}

fn load_config(path: &PathBuf) -> Result<config::FederationConfig, ExitCode> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return Err(ExitCode::from(EXIT_IO));
        }
    };
    match config::parse_config(&text) {
        Ok(cfg) => Ok(cfg),
        Err(e) => {
            eprintln!("error: {e}");
            Err(ExitCode::from(EXIT_CONFIG))
        }
    }
}

fn run(args: RunArgs) -> ExitCode {
    let mut cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if !args.seeds.is_empty() {
        cfg.run.seeds = args.seeds.clone();
    }

    let aggregators: Vec<AggregatorKind> = if args.aggregators.is_empty() {
        vec![cfg.aggregator.clone()]
    } else {
        let mut kinds = Vec::new();
        for name in &args.aggregators {
            match AggregatorKind::from_name(name) {
                Some(k) => kinds.push(k),
                None => {
                    eprintln!("error: unknown aggregator {name}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            }
        }
        kinds
    };

    let out_dir = args
        .out
        .or_else(|| cfg.run.out_dir.clone())
        .or_else(|| std::env::var_os(harness::OUT_DIR_ENV).map(PathBuf::from));
    let Some(out_dir) = out_dir else {
        eprintln!(
            "error: no output directory (use --out, run.out_dir, or ${})",
            harness::OUT_DIR_ENV
        );
        return ExitCode::from(EXIT_CONFIG);
    };

    let summary = run_suite(&cfg, &aggregators, args.jobs);
    let mut succeeded = 0usize;
    for record in &summary.records {
        match (&record.final_metric, &record.error) {
            (Some(metric), _) => {
                succeeded += 1;
                if !args.quiet {
                    eprintln!(
                        "run {}-s{}: metric {metric:.6} ({} ms)",
                        record.aggregator, record.seed, record.elapsed_ms
                    );
                }
            }
            (None, Some(err)) => {
                eprintln!(
                    "warning: run {}-s{} aborted and is excluded from means: {err}",
                    record.aggregator, record.seed
                );
            }
            (None, None) => unreachable!("run without metric or error"),
        }
    }
    if succeeded == 0 {
        eprintln!("error: every run aborted");
        return ExitCode::from(EXIT_RUNTIME);
    }

    match emit_reports(&summary, &out_dir) {
        Ok(paths) => {
            if !args.quiet {
                eprintln!("reports written to {}", out_dir.display());
                for s in &summary.stats {
                    eprintln!(
                        "  {}: mean {:.6} std {:.6} (n={})",
                        s.aggregator, s.mean, s.std, s.n
                    );
                }
                let _ = paths;
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: cannot write reports to {}: {e}", out_dir.display());
            ExitCode::from(EXIT_IO)
        }
    }
}

fn validate(path: PathBuf) -> ExitCode {
    match load_config(&path) {
        Ok(_) => {
            println!("ok");
            ExitCode::SUCCESS
        }
        Err(code) => code,
    }
}

fn table(args: TableArgs) -> ExitCode {
    let text = match std::fs::read_to_string(&args.curves) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.curves.display());
            return ExitCode::from(EXIT_IO);
        }
    };
    let summary = match resummarize_curves(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    match args.out {
        Some(dir) => match emit_reports(&summary, &dir) {
            Ok(_) => {
                if !args.quiet {
                    eprintln!("summary written to {}", dir.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: cannot write summary: {e}");
                ExitCode::from(EXIT_IO)
            }
        },
        None => {
            print!("aggregator,mean,std,n\n");
            for s in &summary.stats {
                println!("{},{:?},{:?},{}", s.aggregator, s.mean, s.std, s.n);
            }
            ExitCode::SUCCESS
        }
    }
}
