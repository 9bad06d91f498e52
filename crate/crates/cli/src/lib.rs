//! Command-line experiment runner.
//!
//! Subcommands: `run`, `sweep`, `gradcheck`, `discretize`. All take
//! `--config PATH`; `--out DIR` and `--threads N` override the config,
//! as do the `INTERLEAVE_OUT` and `INTERLEAVE_THREADS` environment
//! variables (flag beats environment beats config).
//!
//! Exit codes: 0 success, 1 I/O or internal error, 2 config error,
//! 3 numerical divergence, 4 verification failure.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use interleave_core::Error;

use commands::SweepAxis;
use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "interleave",
    about = "Interleaved multi-learner encoder search: runs, sweeps, checks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides config and INTERLEAVE_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (overrides config and INTERLEAVE_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run the configured method once per seed and summarize.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run an ablation sweep along one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Sweep axis.
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
    },
    /// Verify gradients and hypergradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Emit the discretized architecture from a run report (or re-emit an
    /// architecture file unchanged).
    Discretize {
        #[command(flatten)]
        common: Common,
        /// Run report JSON or architecture text file.
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    SweepAxis::parse(s).ok_or_else(|| format!("unknown axis `{s}` (lambda|rounds|order)"))
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_)
        | Error::InvalidCell(_)
        | Error::InvalidSchedule(_)
        | Error::Data(_)
        | Error::LabelOutOfRange { .. }
        | Error::ShapeMismatch(_)
        | Error::UnknownParam(_) => EXIT_CONFIG,
        Error::Divergence { .. } | Error::NonFinite(_) | Error::NotScalar(_) => EXIT_DIVERGENCE,
        Error::Verify(_) => EXIT_CHECK_FAILED,
        Error::Io(_) => EXIT_OTHER,
    }
}

fn resolve_out(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    if let Ok(env) = std::env::var("INTERLEAVE_OUT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from(&cfg.out_dir)
}

fn resolve_threads(common: &Common, cfg: &ExperimentConfig) -> usize {
    if let Some(t) = common.threads {
        return t.max(1);
    }
    if let Ok(env) = std::env::var("INTERLEAVE_THREADS") {
        if let Ok(t) = env.parse::<usize>() {
            return t.max(1);
        }
    }
    cfg.threads.max(1)
}

/// Parse and execute; returns the process exit code. Library entry point
/// so in-process tests can drive the CLI exactly as a shell would.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // --help/--version land here with a zero-status error kind
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };

    let common = match &cli.cmd {
        Cmd::Run { common }
        | Cmd::Sweep { common, .. }
        | Cmd::Gradcheck { common }
        | Cmd::Discretize { common, .. } => common,
    };

    let cfg = match ExperimentConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let out = resolve_out(common, &cfg);
    let threads = resolve_threads(common, &cfg);

    let result: interleave_core::Result<i32> = match &cli.cmd {
        Cmd::Run { .. } => commands::cmd_run(&cfg, &out, threads).map(|()| EXIT_OK),
        Cmd::Sweep { axis, .. } => {
            commands::cmd_sweep(&cfg, *axis, &out, threads).map(|()| EXIT_OK)
        }
        Cmd::Gradcheck { .. } => commands::cmd_gradcheck(&cfg, &out).map(|pass| {
            if pass {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            }
        }),
        Cmd::Discretize { report, .. } => {
            commands::cmd_discretize(report, &out).map(|_| EXIT_OK)
        }
    };

    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
