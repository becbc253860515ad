//! Deterministic seeded discrete-event runner.

mod config;
mod engine;
mod queue;

pub use config::{ConfigError, RobotSpec, ScenarioConfig, TaskDuration, Timeouts};
pub use engine::{run, Command, RunError, SimError, SimEvent, SimEventKind, Simulation, SimulationOutput, Submitted};
pub use queue::{EventClass, EventQueue};
