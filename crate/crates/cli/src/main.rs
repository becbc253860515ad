//! `mrs`: validate scenarios, run them, replay traces and summarize runs.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 invariant
//! violation, 4 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mrs_core::metrics::{robot_report_csv, system_series_csv};
use mrs_core::sim::{run, RunError, ScenarioConfig};
use mrs_core::trace::{self, TraceError};
use mrs_core::{Replay, RobotReport, SystemSeriesRow};

#[derive(Parser)]
#[command(name = "mrs", version, about = "Deterministic multi-robot orchestration simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    /// JSON documents.
    Structured,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its metrics, trace and outcome log.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the run length, in minutes (`30` or `30m`).
        #[arg(long, value_parser = parse_minutes)]
        duration: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Check a scenario file and report every problem found.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Recompute metrics from a trace.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// Directory for the metric files; the system series goes to stdout
        /// when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Summarize a run from its trace.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

fn parse_minutes(s: &str) -> Result<u64, String> {
    s.strip_suffix('m')
        .unwrap_or(s)
        .parse()
        .map_err(|_| format!("`{s}` is not a whole number of minutes"))
}

/// Failure with its exit code.
enum Failure {
    Config(String),
    Invariant(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Invariant(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Invariant(m) | Failure::Io(m) => m,
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(e) => Failure::Config(e.to_string()),
            RunError::Sim(e) => Failure::Invariant(e.to_string()),
        }
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Metrics { .. } => Failure::Invariant(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("cannot read {}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

fn load_scenario(path: &Path) -> Result<ScenarioConfig, Failure> {
    ScenarioConfig::from_toml(&read(path)?).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn json<T: serde::Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("metrics serialize") + "\n"
}

fn write_metrics(
    dir: &Path,
    format: Format,
    series: &[SystemSeriesRow],
    robots: &[RobotReport],
) -> Result<(), Failure> {
    match format {
        Format::Csv => {
            write(dir, "system_series.csv", &system_series_csv(series))?;
            write(dir, "robot_report.csv", &robot_report_csv(robots))
        }
        Format::Structured => {
            write(dir, "system_series.json", &json(series))?;
            write(dir, "robot_report.json", &json(robots))
        }
    }
}

fn execute(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run {
            scenario,
            seed,
            duration,
            out,
            format,
        } => {
            let mut config = load_scenario(&scenario)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(minutes) = duration {
                config.duration_min = minutes;
            }
            let output = run::<f64>(&config)?;
            fs::create_dir_all(&out).map_err(|e| Failure::Io(format!("cannot create {}: {e}", out.display())))?;
            write_metrics(&out, format, &output.series, &output.robots)?;
            write(&out, "trace.log", &output.trace)?;
            write(&out, "outcomes.log", &output.outcomes_log())?;
            log::info!("wrote {} rows to {}", output.series.len(), out.display());
            Ok(())
        }
        Cmd::Validate { scenario } => {
            let config = load_scenario(&scenario)?;
            println!(
                "{}: valid ({} robots, {} blueprints, {} min)",
                scenario.display(),
                config.robots.len(),
                config.blueprints.len(),
                config.duration_min
            );
            Ok(())
        }
        Cmd::Replay { trace, out, format } => {
            let replayed: Replay = trace::replay(&read(&trace)?)?;
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)
                        .map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
                    write_metrics(&dir, format, &replayed.series, &replayed.robots)
                }
                None => {
                    match format {
                        Format::Csv => print!("{}", system_series_csv(&replayed.series)),
                        Format::Structured => print!("{}", json(&replayed.series)),
                    }
                    Ok(())
                }
            }
        }
        Cmd::Report { trace, format } => {
            let text = read(&trace)?;
            let replayed: Replay = trace::replay(&text)?;
            print!("{}", report(&replayed, format));
            Ok(())
        }
    }
}

/// Totals, failure breakdown and robot ratios for a finished run.
fn report(r: &Replay, format: Format) -> String {
    let mut failures = std::collections::BTreeMap::<String, u64>::new();
    for o in &r.outcomes {
        if let Some(reason) = o.status.failure_reason() {
            *failures.entry(reason.to_string()).or_default() += 1;
        }
    }
    let last = r.series.last();
    if format == Format::Structured {
        return json(&serde_json::json!({
            "final_row": last,
            "failures": failures,
            "robots": r.robots,
        }));
    }
    let mut s = String::new();
    match last {
        Some(row) => {
            s += &format!(
                "received {}, processed {}, success {}, failed {}, unprocessed {}\n",
                row.received, row.processed, row.success, row.failed, row.unprocessed
            )
        }
        None => s += "empty run\n",
    }
    for (reason, n) in &failures {
        s += &format!("  {reason}: {n}\n");
    }
    s += &robot_report_csv(&r.robots);
    s
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MRS_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mrs: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
