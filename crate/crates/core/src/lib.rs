//! Deterministic multi-robot orchestration simulator.
//!
//! Three controller agents talk over an in-process message bus: a requests
//! manager queues incoming requests first come first served, a planner binds
//! each blueprint task to the least-loaded capable robot, and a robots
//! manager executes the resulting plan one task at a time. Controller logic
//! is written as process documents run by a small token engine.
//! [`sim`] drives everything from a seeded event queue and [`metrics`]
//! turns delivered messages into the system series and robot reports.
//!
//! Metric ratios are generic over the float type; the aliases below fix it
//! to `f64`.

pub mod bus;
pub mod controller;
pub mod domain;
pub mod kb;
pub mod metrics;
pub mod pln;
pub mod rbm;
pub mod rqm;
pub mod scalar;
pub mod sim;
pub mod time;
pub mod trace;
pub mod workflow;

pub type MetricsCollector = metrics::MetricsCollector<f64>;
pub type SystemSeriesRow = metrics::SystemSeriesRow<f64>;
pub type RobotReport = metrics::RobotReport<f64>;
pub type Simulation = sim::Simulation<f64>;
pub type SimEvent = sim::SimEvent<f64>;
pub type SimulationOutput = sim::SimulationOutput<f64>;
pub type Replay = trace::Replay<f64>;
