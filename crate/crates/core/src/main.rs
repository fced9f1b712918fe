use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use coevo::coordinator::report::emit_report;
use coevo::coordinator::{
    run_repetitions, run_single_agent, store_error_kind, CoordinatorError, ExperimentConfig, Mode,
    RunOptions,
};
use coevo::graph::AgentId;
use coevo::store::{Store, StoreError};

#[derive(Parser)]
#[command(
    name = "coevo",
    version,
    about = "Multiagent evolution of a shared multitask network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sequential,
    Multiagent,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment, one run directory per repetition.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Run each agent as a separate OS process.
        #[arg(long)]
        processes: bool,
        /// Give every task the same per-child training budget.
        #[arg(long)]
        equal_budget: bool,
        /// Output directory; repetition r goes to <DIR>/rep-<r>.
        #[arg(long, default_value = "runs")]
        store: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        repetitions: Option<u32>,
    },
    /// Write CSV and SVG reports for finished runs.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Remove superseded bests, unreferenced components and temp files.
    Gc {
        #[arg(long)]
        store: PathBuf,
    },
    /// Run one agent of an initialized run directory.
    #[command(hide = true)]
    Agent {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        agent_id: String,
    },
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            mode,
            processes,
            equal_budget,
            store,
            seed,
            iterations,
            repetitions,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.equal_budget |= equal_budget;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if let Some(r) = repetitions {
                cfg.repetitions = r;
            }
            cfg.validate()?;
            let mode = match mode {
                ModeArg::Sequential => Mode::Sequential,
                ModeArg::Multiagent => Mode::Multiagent,
            };
            let opts = RunOptions {
                processes,
                agent_exe: Some(std::env::current_exe().context("locating the agent executable")?),
            };
            for (dir, record) in run_repetitions(&cfg, mode, &store, &opts)? {
                println!(
                    "{}",
                    json!({"run_dir": dir, "mode": mode.name(), "seed": record.seed, "wall_time_s": record.wall_time_s})
                );
            }
        }
        Command::Report { runs, out } => {
            let summary = emit_report(&runs, &out)?;
            for f in &summary.files {
                println!("{}", f.display());
            }
            if let Some((s, bound)) = summary.speedup {
                println!("{}", json!({"speedup": s, "bound": bound}));
            }
        }
        Command::Gc { store } => {
            let dir = if store.join("manifest.json").exists() {
                store
            } else {
                store.join("store")
            };
            let report = Store::open(&dir)?.gc()?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Agent { run_dir, agent_id } => {
            let agent = AgentId::new(agent_id)?;
            run_single_agent(&run_dir, &agent)?;
        }
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(c) = e.downcast_ref::<CoordinatorError>() {
        c.kind()
    } else if let Some(s) = e.downcast_ref::<StoreError>() {
        store_error_kind(s)
    } else {
        "Error"
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = json!({"error": error_kind(&e), "message": format!("{e:#}")});
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
