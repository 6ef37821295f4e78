//! `e3`: run experiments, summarize their CSVs, and run the misfit lab.
//!
//! Exit codes: 0 on success, 1 on I/O errors, 2 on schema or configuration
//! errors, 3 on agent failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use e3_core::envs::maze::maze_generate;
use e3_core::envs::MazeConfig;
use e3_core::harness::{
    aggregate, plot_data, read_records_file, run_experiment, write_plot_data, write_summary,
    AgentSpec, ExperimentConfig, RunOptions,
};
use e3_core::lab::{run_lab, LabConfig};
use e3_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "e3",
    version,
    about = "Disagreement-driven explore-exploit experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "E3_OUT_DIR")]
    out: Option<PathBuf>,
    /// Worker pool width.
    #[arg(long, env = "E3_THREADS")]
    threads: Option<usize>,
    /// Added to every configured seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every seed of an experiment and write CSV, config and manifest.
    Run(RunArgs),
    /// Run a DREEM experiment and print the per-seed outcome.
    Dreem(RunArgs),
    /// Per-episode median, min and max across the seeds of run CSVs.
    Aggregate {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot-ready summary of labeled runs; repeat a label to pool files.
    PlotData {
        /// `label=path` pairs.
        #[arg(long = "input", required = true, value_parser = parse_labeled)]
        inputs: Vec<(String, PathBuf)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized checks of misfit, rank and ellipsoid properties.
    MisfitLab {
        /// Lab configuration (JSON); defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a generated maze as text.
    MazeDump {
        #[arg(long, default_value_t = 5)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_labeled(s: &str) -> Result<(String, PathBuf), String> {
    let (label, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected label=path, got {s:?}"))?;
    if label.is_empty() || path.is_empty() {
        return Err(format!("expected label=path, got {s:?}"));
    }
    Ok((label.to_string(), PathBuf::from(path)))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Schema { .. }
        | Error::Config(_)
        | Error::Json(_)
        | Error::InvalidModel(_)
        | Error::Alignment(_) => 2,
        Error::Io(_) | Error::Csv(_) => 1,
        _ => 3,
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::from_json(&fs::read(path)?)
}

fn write_or_print(out: Option<&Path>, bytes: &[u8]) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn run(args: &RunArgs, dreem_only: bool) -> Result<(), Error> {
    let config = load_config(&args.config)?;
    if dreem_only && !matches!(config.agent, AgentSpec::Dreem(_)) {
        return Err(Error::Schema {
            path: "agent.kind".into(),
            message: "the dreem command needs a dreem agent".into(),
        });
    }
    let options = RunOptions {
        out_dir: args.out.clone(),
        threads: args.threads,
        seed_offset: args.seed_offset,
    };
    let outcome = run_experiment(&config, &options)?;
    println!(
        "{} rows -> {}",
        outcome.records.len(),
        outcome.csv_path.display()
    );
    if dreem_only {
        let dir = outcome.csv_path.parent().unwrap_or(Path::new("."));
        for entry in &outcome.manifest.seeds {
            let path = dir.join(format!("dreem_seed{}.json", entry.seed));
            let result: serde_json::Value = serde_json::from_slice(&fs::read(&path)?)?;
            println!(
                "seed {}: rounds {} surviving {} value gap {}",
                entry.seed,
                result["rounds"],
                result["final_versionspace_size"],
                result["value_gap"]
            );
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => run(&args, false),
        Command::Dreem(args) => run(&args, true),
        Command::Aggregate { csv, out } => {
            let paths: Vec<&Path> = csv.iter().map(PathBuf::as_path).collect();
            let rows = aggregate(&paths)?;
            let mut buf = Vec::new();
            write_summary(&rows, &mut buf)?;
            write_or_print(out.as_deref(), &buf)
        }
        Command::PlotData { inputs, out } => {
            let mut groups: Vec<(String, Vec<_>)> = Vec::new();
            for (label, path) in &inputs {
                let records = read_records_file(path)?;
                match groups.iter_mut().find(|(l, _)| l == label) {
                    Some((_, v)) => v.push(records),
                    None => groups.push((label.clone(), vec![records])),
                }
            }
            let rows = plot_data(&groups)?;
            let mut buf = Vec::new();
            write_plot_data(&rows, &mut buf)?;
            write_or_print(out.as_deref(), &buf)
        }
        Command::MisfitLab { config, out } => {
            let cfg: LabConfig = match config {
                Some(p) => {
                    let bytes = fs::read(p)?;
                    let de = &mut serde_json::Deserializer::from_slice(&bytes);
                    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
                        path: e.path().to_string(),
                        message: e.inner().to_string(),
                    })?
                }
                None => LabConfig::default(),
            };
            let report = run_lab(&cfg)?;
            eprintln!(
                "disagreement implies misfit: {} violations in {} checks; ipm max error {:e}; concentration misses {:.3}; rank violations {}/{}; max slab ratio {:.4}",
                report.implication.violations,
                report.implication.checks,
                report.ipm.max_abs_error,
                report.concentration.violation_fraction,
                report.rank.state_bound_violations,
                report.rank.inner_dim_violations,
                report.mvee.max_ratio
            );
            let mut bytes = serde_json::to_vec_pretty(&report)?;
            bytes.push(b'\n');
            write_or_print(out.as_deref(), &bytes)
        }
        Command::MazeDump { size, seed } => {
            let maze = maze_generate(&MazeConfig::new(size), seed)?;
            print!("{}", maze.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
