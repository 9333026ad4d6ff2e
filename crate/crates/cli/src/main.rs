use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use harq_relay::experiment::{self, ExperimentConfig, OutputFile};
use harq_relay::{Error, Execution};

const PRESETS: [(&str, &str); 3] = [
    ("fig3", include_str!("../presets/fig3.json")),
    ("fig4", include_str!("../presets/fig4.json")),
    ("certify-default", include_str!("../presets/certify-default.json")),
];

/// Scheduling experiments for relay-assisted HARQ downlinks.
#[derive(Parser)]
#[command(name = "harq-relay", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every (grid value, policy) pair and write runs plus a summary.
    Simulate(Common),
    /// Compare the index policies with the exact MDP optimum on random instances.
    Certify(Common),
    /// Write the priority index table and, optionally, the order along a sweep.
    Indices(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment file, or `@name` for a bundled preset (fig3, fig4, certify-default).
    config: String,
    /// Output directory; overrides the experiment file.
    #[arg(long, env = "HARQ_RELAY_OUT")]
    out: Option<PathBuf>,
    /// Master seed; overrides the experiment file.
    #[arg(long, env = "HARQ_RELAY_SEED")]
    seed: Option<u64>,
    /// Parallel jobs; 1 runs sequentially, 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

/// Failures in reading or validating the experiment.
#[derive(Debug)]
struct SchemaError(anyhow::Error);

impl std::fmt::Display for SchemaError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for SchemaError {}

fn load(spec: &str) -> Result<ExperimentConfig> {
    let text = match spec.strip_prefix('@') {
        Some(name) => PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| (*t).to_string())
            .with_context(|| format!("no bundled preset named {name:?}"))?,
        None => fs::read_to_string(spec).with_context(|| format!("reading {spec}"))?,
    };
    ExperimentConfig::from_json(&text).with_context(|| format!("parsing {spec}"))
}

fn write_outputs(dir: &Path, files: &[OutputFile]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    let (kind, args) = match cmd {
        Command::Simulate(a) => ("simulate", a),
        Command::Certify(a) => ("certify", a),
        Command::Indices(a) => ("indices", a),
    };
    let exp = load(&args.config).map_err(SchemaError)?;
    let seed = args.seed.unwrap_or(exp.seed);
    let out = args
        .out
        .clone()
        .or_else(|| exp.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let exec = Execution::from_jobs(args.jobs);

    let files = match kind {
        "simulate" => {
            let (summary, files) = experiment::simulate(&exp, seed, exec)?;
            for e in &summary.endpoints {
                eprintln!(
                    "{}: cost change {:+.2}%, throughput change {:+.2}% from first to last grid value",
                    e.policy,
                    100.0 * e.cost_change,
                    100.0 * e.throughput_change
                );
            }
            files
        }
        "certify" => {
            let (report, files) = experiment::certify_cmd(&exp, seed, exec)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!(
                "{} draining and {} average-cost instances: {}",
                report.draining.len(),
                report.average.len(),
                if report.passed { "PASS" } else { "FAIL" }
            );
            files
        }
        _ => {
            let (report, files) = experiment::indices(&exp)?;
            eprintln!(
                "{} queues, {} order flips",
                report.table.rows.len(),
                report.flips.len()
            );
            files
        }
    };
    write_outputs(&out, &files)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<SchemaError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::StateSpaceTooLarge { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
