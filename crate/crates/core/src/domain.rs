//! Value types shared by every controller, and the capability predicate.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::time::SimTime;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                $name(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(
    /// Atomic robot skill, e.g. `C1`.
    CapabilityId
);
string_id!(TaskId);
string_id!(BlueprintId);
string_id!(RequestId);
string_id!(
    /// Kind of an incoming request; selects the blueprint that serves it.
    RequestKind
);
string_id!(RobotId);

pub type CapabilitySet = BTreeSet<CapabilityId>;

/// Builds a capability set from string literals.
pub fn caps<I, S>(ids: I) -> CapabilitySet
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    ids.into_iter().map(|s| CapabilityId::new(s)).collect()
}

/// Unit of work: a task can be performed by any robot owning every required
/// capability.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub requires: CapabilitySet,
}

impl Task {
    pub fn new<I, S>(id: &str, requires: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Task {
            id: TaskId::new(id),
            requires: caps(requires),
        }
    }
}

/// Ordered task sequence that fulfils one request kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanBlueprint {
    pub id: BlueprintId,
    pub request_kind: RequestKind,
    pub tasks: Vec<Task>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub kind: RequestKind,
    pub arrival: SimTime,
}

/// One task of a verified plan bound to the robot that will perform it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub task: Task,
    pub robot: RobotId,
}

/// Blueprint instance with every task bound to a concrete robot, in
/// blueprint order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiedPlan {
    pub blueprint_id: BlueprintId,
    pub request_id: RequestId,
    pub assignments: Vec<Assignment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    NoBlueprint,
    InsufficientRobots,
    CapabilityMismatch,
    PlanTimeout,
    TaskTimeout,
    TaskFailed,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FailureReason::NoBlueprint => "no_blueprint",
            FailureReason::InsufficientRobots => "insufficient_robots",
            FailureReason::CapabilityMismatch => "capability_mismatch",
            FailureReason::PlanTimeout => "plan_timeout",
            FailureReason::TaskTimeout => "task_timeout",
            FailureReason::TaskFailed => "task_failed",
        };
        f.write_str(s)
    }
}

/// Terminal status of a request. A failure always carries its reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "failure_reason", rename_all = "snake_case")]
pub enum OutcomeStatus {
    Success,
    Failed(FailureReason),
}

impl OutcomeStatus {
    pub fn is_success(self) -> bool {
        matches!(self, OutcomeStatus::Success)
    }

    pub fn failure_reason(self) -> Option<FailureReason> {
        match self {
            OutcomeStatus::Success => None,
            OutcomeStatus::Failed(r) => Some(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub request_id: RequestId,
    #[serde(flatten)]
    pub status: OutcomeStatus,
    pub completion_time: SimTime,
}

/// True iff `capabilities` contains every capability the task requires.
pub fn robot_can_perform(capabilities: &CapabilitySet, task: &Task) -> bool {
    task.requires.is_subset(capabilities)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BlueprintViolation {
    #[error("empty task list")]
    EmptyTaskList,
    #[error("duplicate task id {0}")]
    DuplicateTaskId(TaskId),
    #[error("task {0} has an empty required capability set")]
    EmptyRequirement(TaskId),
    #[error("empty identifier")]
    EmptyIdentifier,
}

/// Checks every blueprint invariant, reporting all violations at once.
pub fn validate_blueprint(pb: &PlanBlueprint) -> Result<(), Vec<BlueprintViolation>> {
    let mut violations = Vec::new();
    if pb.id.as_str().is_empty() || pb.request_kind.as_str().is_empty() {
        violations.push(BlueprintViolation::EmptyIdentifier);
    }
    if pb.tasks.is_empty() {
        violations.push(BlueprintViolation::EmptyTaskList);
    }
    let mut seen = HashSet::new();
    for task in &pb.tasks {
        if task.id.as_str().is_empty() {
            violations.push(BlueprintViolation::EmptyIdentifier);
        }
        if !seen.insert(&task.id) {
            violations.push(BlueprintViolation::DuplicateTaskId(task.id.clone()));
        }
        if task.requires.is_empty() {
            violations.push(BlueprintViolation::EmptyRequirement(task.id.clone()));
        }
        if task.requires.iter().any(|c| c.as_str().is_empty()) {
            violations.push(BlueprintViolation::EmptyIdentifier);
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// The three-task blueprint used throughout the worked plan-construction
/// example: `T1:{C1,C3,C4}`, `T2:{C2}`, `T3:{C2,C5}`.
pub fn example_blueprint() -> PlanBlueprint {
    PlanBlueprint {
        id: BlueprintId::new("Pb2"),
        request_kind: RequestKind::new("Rq2"),
        tasks: vec![
            Task::new("T1", ["C1", "C3", "C4"]),
            Task::new("T2", ["C2"]),
            Task::new("T3", ["C2", "C5"]),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn can_perform_examples() {
        let t1 = Task::new("T1", ["C1", "C3", "C4"]);
        assert!(robot_can_perform(&caps(["C1", "C2", "C3", "C4"]), &t1));
        let t2 = Task::new("T2", ["C2"]);
        assert!(robot_can_perform(&caps(["C2", "C5"]), &t2));
        let t3 = Task::new("T3", ["C2", "C5"]);
        assert!(!robot_can_perform(&caps(["C5"]), &t3));
    }

    #[test]
    fn validate_reports_every_violation() {
        assert!(validate_blueprint(&example_blueprint()).is_ok());

        let empty = PlanBlueprint {
            tasks: vec![],
            ..example_blueprint()
        };
        assert_eq!(validate_blueprint(&empty), Err(vec![BlueprintViolation::EmptyTaskList]));

        let dup = PlanBlueprint {
            tasks: vec![
                Task::new("T1", ["C1"]),
                Task::new("T1", ["C2"]),
                Task::new("T2", Vec::<String>::new()),
            ],
            ..example_blueprint()
        };
        let errs = validate_blueprint(&dup).unwrap_err();
        assert_eq!(
            errs,
            vec![
                BlueprintViolation::DuplicateTaskId(TaskId::new("T1")),
                BlueprintViolation::EmptyRequirement(TaskId::new("T2")),
            ]
        );
    }

    #[test]
    fn outcome_serialization() {
        let ok = RequestOutcome {
            request_id: RequestId::new("req-1"),
            status: OutcomeStatus::Success,
            completion_time: SimTime::from_secs(3),
        };
        assert_eq!(
            serde_json::to_string(&ok).unwrap(),
            r#"{"request_id":"req-1","status":"success","completion_time":3000}"#
        );
        let failed = RequestOutcome {
            status: OutcomeStatus::Failed(FailureReason::NoBlueprint),
            ..ok
        };
        let text = serde_json::to_string(&failed).unwrap();
        assert_eq!(
            text,
            r#"{"request_id":"req-1","status":"failed","failure_reason":"no_blueprint","completion_time":3000}"#
        );
        let back: RequestOutcome = serde_json::from_str(&text).unwrap();
        assert_eq!(back, failed);
    }

    fn cap_set() -> impl Strategy<Value = CapabilitySet> {
        proptest::collection::btree_set(0u8..8, 0..8)
            .prop_map(|s| s.into_iter().map(|c| CapabilityId::new(format!("C{c}"))).collect())
    }

    proptest! {
        #[test]
        fn can_perform_matches_membership_check(have in cap_set(), need in cap_set()) {
            let task = Task { id: TaskId::new("T"), requires: need.clone() };
            let brute = need.iter().all(|c| have.iter().any(|h| h == c));
            prop_assert_eq!(robot_can_perform(&have, &task), brute);
        }

        #[test]
        fn can_perform_is_monotone(have in cap_set(), need in cap_set(), extra in 0u8..8) {
            let task = Task { id: TaskId::new("T"), requires: need };
            let before = robot_can_perform(&have, &task);
            let mut more = have.clone();
            more.insert(CapabilityId::new(format!("C{extra}")));
            prop_assert!(!before || robot_can_perform(&more, &task));
        }
    }
}
