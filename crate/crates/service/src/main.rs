use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mrs_core::sim::ScenarioConfig;
use mrs_service::{serve, Handle, ServiceConfig};

#[derive(Parser)]
#[command(name = "mrs-service", version, about = "Serve a paced simulator run over HTTP")]
struct Args {
    /// Scenario file; the built-in default scenario when absent.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    /// Logical seconds per wall-clock second.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    /// Start with the clock stopped.
    #[arg(long)]
    paused: bool,
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MRS_LOG_LEVEL", "info")).init();
    let args = Args::parse();
    let scenario = match &args.scenario {
        None => ScenarioConfig::default(),
        Some(path) => match std::fs::read_to_string(path) {
            Err(e) => {
                eprintln!("mrs-service: cannot read {}: {e}", path.display());
                return ExitCode::from(4);
            }
            Ok(text) => match ScenarioConfig::from_toml(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("mrs-service: {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            },
        },
    };
    if !(args.speed.is_finite() && args.speed > 0.0) {
        eprintln!("mrs-service: --speed must be positive");
        return ExitCode::from(2);
    }
    let config = ServiceConfig {
        speed: args.speed,
        start_paused: args.paused,
        ..ServiceConfig::new(scenario)
    };
    let (handle, _thread) = match Handle::start(config) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("mrs-service: {e}");
            return ExitCode::from(2);
        }
    };
    let listener = match tokio::net::TcpListener::bind(&args.bind).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("mrs-service: cannot bind {}: {e}", args.bind);
            return ExitCode::from(4);
        }
    };
    log::info!("listening on {}", args.bind);
    match serve(listener, handle).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mrs-service: {e}");
            ExitCode::from(4)
        }
    }
}
