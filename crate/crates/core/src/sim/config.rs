//! Scenario configuration: the run's fleet, blueprints, request mix, clocks
//! and fault knobs, loaded from TOML.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{caps, validate_blueprint, CapabilitySet, PlanBlueprint, RequestKind, RobotId, Task};
use crate::domain::{example_blueprint, BlueprintId};
use crate::rbm::{DeregistrationMode, FaultProfile, RbmConfig};
use crate::rqm::RqmConfig;
use crate::time::{MS_PER_MINUTE, MS_PER_SECOND};
use crate::trace::RosterEntry;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub id: RobotId,
    pub capabilities: CapabilitySet,
    /// Registered when the run starts.
    #[serde(default)]
    pub registered: bool,
    /// Tasks completed before the run.
    #[serde(default)]
    pub history: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timeouts {
    pub plan_s: u64,
    pub exec_s: u64,
    pub task_s: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            plan_s: 30,
            exec_s: 300,
            task_s: 60,
        }
    }
}

/// Robot work time: `base_ms` plus a uniform draw from `0..=jitter_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDuration {
    pub base_ms: u64,
    pub jitter_ms: u64,
}

impl Default for TaskDuration {
    fn default() -> Self {
        TaskDuration {
            base_ms: 20_000,
            jitter_ms: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_min: u64,
    /// Seconds between generated requests; 0 disables generation.
    pub request_period_s: u64,
    /// Seconds between churn ticks; 0 disables churn.
    pub churn_period_s: u64,
    pub sample_interval_s: u64,
    pub max_robots: usize,
    /// Requests the requests manager works on at once.
    pub max_in_flight: usize,
    /// One-way delay of messages between controllers and robots.
    pub message_latency_ms: u64,
    #[serde(default)]
    pub deregistration: DeregistrationMode,
    #[serde(default)]
    pub timeouts: Timeouts,
    #[serde(default)]
    pub task_duration: TaskDuration,
    pub robots: Vec<RobotSpec>,
    #[serde(default)]
    pub blueprints: Vec<PlanBlueprint>,
    #[serde(default)]
    pub request_kind_weights: BTreeMap<RequestKind, f64>,
    #[serde(default)]
    pub fault_injection: BTreeMap<RobotId, FaultProfile>,
}

impl Default for ScenarioConfig {
    /// The 30-minute experiment: three known robots, two registered, one
    /// request and one churn tick per minute.
    fn default() -> Self {
        let robot = |id: &str, c: &[&str], registered: bool, history: u64| RobotSpec {
            id: RobotId::new(id),
            capabilities: caps(c.iter().copied()),
            registered,
            history,
        };
        let blueprint = |id: &str, kind: &str, tasks: Vec<Task>| PlanBlueprint {
            id: BlueprintId::new(id),
            request_kind: RequestKind::new(kind),
            tasks,
        };
        ScenarioConfig {
            seed: 1,
            duration_min: 30,
            request_period_s: 60,
            churn_period_s: 60,
            sample_interval_s: 60,
            max_robots: 3,
            max_in_flight: 1,
            message_latency_ms: 10,
            deregistration: DeregistrationMode::Deferred,
            timeouts: Timeouts::default(),
            task_duration: TaskDuration::default(),
            robots: vec![
                robot("R1", &["C1", "C2", "C3", "C4"], true, 9),
                robot("R2", &["C1", "C3", "C4", "C5"], false, 0),
                robot("R3", &["C2", "C5"], true, 11),
            ],
            blueprints: vec![
                blueprint("Pb1", "Rq1", vec![Task::new("T1", ["C2"]), Task::new("T2", ["C4"])]),
                example_blueprint(),
                blueprint("Pb3", "Rq3", vec![Task::new("T1", ["C6"])]),
            ],
            request_kind_weights: [("Rq1", 2.0), ("Rq2", 6.0), ("Rq3", 1.0), ("Rq4", 1.0)]
                .into_iter()
                .map(|(k, w)| (RequestKind::new(k), w))
                .collect(),
            fault_injection: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    /// Every violated constraint, in field order.
    #[error("invalid scenario:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        if self.duration_min == 0 {
            errors.push("duration_min must be positive".to_owned());
        }
        if self.sample_interval_s == 0 {
            errors.push("sample_interval_s must be positive".to_owned());
        }
        if self.max_robots == 0 {
            errors.push("max_robots must be positive".to_owned());
        }
        if self.max_in_flight == 0 {
            errors.push("max_in_flight must be positive".to_owned());
        }
        let t = self.timeouts;
        if t.plan_s == 0 || t.exec_s == 0 || t.task_s == 0 {
            errors.push("timeouts must be positive".to_owned());
        }
        if self.task_duration.base_ms == 0 {
            errors.push("task_duration.base_ms must be positive".to_owned());
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.robots {
            if r.id.as_str().is_empty() {
                errors.push("robot with empty id".to_owned());
            }
            if !seen.insert(&r.id) {
                errors.push(format!("robot {} listed twice", r.id));
            }
            if r.capabilities.is_empty() {
                errors.push(format!("robot {} has no capabilities", r.id));
            }
        }
        let registered = self.robots.iter().filter(|r| r.registered).count();
        if registered > self.max_robots {
            errors.push(format!(
                "{registered} robots start registered but max_robots is {}",
                self.max_robots
            ));
        }
        let mut kinds = std::collections::BTreeSet::new();
        for pb in &self.blueprints {
            if let Err(violations) = validate_blueprint(pb) {
                for v in violations {
                    errors.push(format!("blueprint {}: {v}", pb.id));
                }
            }
            if !kinds.insert(&pb.request_kind) {
                errors.push(format!("request kind {} has two blueprints", pb.request_kind));
            }
        }
        if self.request_period_s > 0 {
            if let Some((k, w)) = self
                .request_kind_weights
                .iter()
                .find(|(_, w)| !w.is_finite() || **w < 0.0)
            {
                errors.push(format!("weight {w} for {k} must be a non-negative number"));
            }
            let total: f64 = self.request_kind_weights.values().filter(|w| w.is_finite()).sum();
            if total <= 0.0 {
                errors.push("request_kind_weights must have a positive sum".to_owned());
            }
        }
        for (robot, f) in &self.fault_injection {
            if !self.robots.iter().any(|r| &r.id == robot) {
                errors.push(format!("fault_injection names unknown robot {robot}"));
            }
            for (name, p) in [
                ("stall_probability", f.stall_probability),
                ("fail_probability", f.fail_probability),
            ] {
                if !(0.0..=1.0).contains(&p) {
                    errors.push(format!("{name} for {robot} must lie in [0, 1]"));
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    pub fn duration_ms(&self) -> u64 {
        self.duration_min * MS_PER_MINUTE
    }

    pub fn rqm_config(&self) -> RqmConfig {
        RqmConfig {
            plan_timeout_ms: self.timeouts.plan_s * MS_PER_SECOND,
            exec_timeout_ms: self.timeouts.exec_s * MS_PER_SECOND,
            max_in_flight: self.max_in_flight,
        }
    }

    pub fn rbm_config(&self) -> RbmConfig {
        RbmConfig {
            task_timeout_ms: self.timeouts.task_s * MS_PER_SECOND,
            deregistration: self.deregistration,
        }
    }

    pub fn roster(&self) -> Vec<RosterEntry> {
        self.robots
            .iter()
            .map(|r| RosterEntry {
                id: r.id.clone(),
                capabilities: r.capabilities.clone(),
                registered: r.registered,
                tasks_completed: r.history,
            })
            .collect()
    }
}
