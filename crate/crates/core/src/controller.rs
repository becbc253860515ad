//! Plumbing shared by the three controllers: the effects they emit and the
//! glue that runs a process definition against a per-message handler.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::bus::AclMessage;
use crate::domain::{RequestId, RobotId, TaskId};
use crate::time::SimTime;
use crate::workflow::{parse_process, run, ActionHandler, ConditionEnv, ProcessDefinition, WorkflowFault};

/// Timer armed by a controller; fires back into its owner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "timer", rename_all = "snake_case")]
pub enum Timer {
    /// Requests manager gave up waiting for the planner.
    PlanDeadline { request: RequestId, epoch: u64 },
    /// Requests manager gave up waiting for plan execution.
    ExecDeadline { request: RequestId, epoch: u64 },
    /// Robots manager gave up waiting for a robot.
    TaskDeadline {
        request: RequestId,
        task: TaskId,
        epoch: u64,
    },
    /// Simulated robot finishes its current job.
    RobotDone { robot: RobotId, epoch: u64 },
    /// Requests manager re-checks its queue.
    Poll,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "op", content = "agent", rename_all = "snake_case")]
pub enum BusOp {
    /// Puts a robot agent on the bus and publishes one service per capability.
    JoinRobot(RobotId),
    LeaveRobot(RobotId),
}

/// Side effect requested by a controller, applied by the host in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Send(AclMessage),
    Timer { at: SimTime, timer: Timer },
    Bus(BusOp),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ControllerError {
    #[error("process {process}: {fault}")]
    Workflow {
        process: &'static str,
        fault: WorkflowFault,
    },
    #[error("process {process} failed to load: {message}")]
    Definition { process: &'static str, message: String },
}

/// Loads a shipped process document and checks it binds exactly `actions`.
pub(crate) fn load(name: &'static str, document: &str, actions: &[&str]) -> Result<ProcessDefinition, ControllerError> {
    let def = parse_process(document).map_err(|e| ControllerError::Definition {
        process: name,
        message: e.to_string(),
    })?;
    let declared = def.action_keys();
    let bound: BTreeSet<&str> = actions.iter().copied().collect();
    if declared != bound {
        let missing: Vec<_> = declared.difference(&bound).collect();
        let unused: Vec<_> = bound.difference(&declared).collect();
        return Err(ControllerError::Definition {
            process: name,
            message: format!("unbound actions {missing:?}, unused handlers {unused:?}"),
        });
    }
    Ok(def)
}

/// Runs a fresh instance of `def` with an empty condition environment.
pub(crate) fn execute<H: ActionHandler>(
    process: &'static str,
    def: &ProcessDefinition,
    handler: &mut H,
) -> Result<Vec<String>, ControllerError> {
    run(def, ConditionEnv::new(), handler)
        .map(|r| r.actions)
        .map_err(|fault| ControllerError::Workflow { process, fault })
}

/// Binds every listed routing flag, exactly one of `on` being true unless
/// `on` is `None`.
pub(crate) fn route(env: &mut ConditionEnv, flags: &[&str], on: Option<&str>) {
    for f in flags {
        env.insert((*f).to_owned(), Some(*f) == on);
    }
}

pub(crate) fn set(env: &mut ConditionEnv, flag: &str, value: bool) {
    env.insert(flag.to_owned(), value);
}
