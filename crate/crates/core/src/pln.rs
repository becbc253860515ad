//! Planner: binds every blueprint task to a capable robot, balancing load by
//! task history.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bus::{names, AclMessage, Content, Performative, PlanAccepted, PlanFailureReport};
use crate::controller::{self, set, ControllerError, Effect};
use crate::domain::{
    robot_can_perform, Assignment, CapabilitySet, FailureReason, PlanBlueprint, RequestId, RobotId, TaskId,
    VerifiedPlan,
};
use crate::kb::KnowledgeBase;
use crate::workflow::{ActionHandler, ConditionEnv, ProcessDefinition};

/// Fewest registered robots a plan can be built with.
pub const MIN_ROBOTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum PlanFailure {
    InsufficientRobots { registered: usize },
    CapabilityMismatch { task: TaskId },
}

impl PlanFailure {
    pub fn reason(&self) -> FailureReason {
        match self {
            PlanFailure::InsufficientRobots { .. } => FailureReason::InsufficientRobots,
            PlanFailure::CapabilityMismatch { .. } => FailureReason::CapabilityMismatch,
        }
    }
}

/// A registered robot as the planner sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub robot: RobotId,
    pub capabilities: CapabilitySet,
    pub tasks_completed: u64,
}

/// Registered robots of `kb`, ordered by id.
pub fn registry_snapshot(kb: &KnowledgeBase) -> Vec<Candidate> {
    kb.registered()
        .map(|r| Candidate {
            robot: r.id.clone(),
            capabilities: r.capabilities.clone(),
            tasks_completed: r.tasks_completed,
        })
        .collect()
}

/// Record of one task binding, kept for auditing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanningDecision {
    pub task: TaskId,
    /// Capable robots with their effective history at decision time.
    pub candidates: Vec<(RobotId, u64)>,
    pub chosen: RobotId,
}

/// The candidate with the smallest effective history; ties go to the
/// lexicographically smallest id.
pub fn select_robot(candidates: &[(RobotId, u64)]) -> Option<RobotId> {
    candidates
        .iter()
        .min_by(|(a, ha), (b, hb)| ha.cmp(hb).then_with(|| a.cmp(b)))
        .map(|(r, _)| r.clone())
}

pub type PlanResult = Result<(VerifiedPlan, Vec<PlanningDecision>), PlanFailure>;

/// Builds a verified plan over a registry snapshot.
///
/// Effective history is the completed-task count plus assignments already
/// made earlier in the same plan.
pub fn build_verified_plan(pb: &PlanBlueprint, request_id: &RequestId, registry: &[Candidate]) -> PlanResult {
    if registry.len() < MIN_ROBOTS {
        return Err(PlanFailure::InsufficientRobots {
            registered: registry.len(),
        });
    }
    let mut tentative: BTreeMap<RobotId, u64> = BTreeMap::new();
    let mut assignments = Vec::with_capacity(pb.tasks.len());
    let mut decisions = Vec::with_capacity(pb.tasks.len());
    for task in &pb.tasks {
        let mut candidates: Vec<(RobotId, u64)> = registry
            .iter()
            .filter(|c| robot_can_perform(&c.capabilities, task))
            .map(|c| {
                let extra = tentative.get(&c.robot).copied().unwrap_or(0);
                (c.robot.clone(), c.tasks_completed + extra)
            })
            .collect();
        candidates.sort();
        let Some(chosen) = select_robot(&candidates) else {
            return Err(PlanFailure::CapabilityMismatch { task: task.id.clone() });
        };
        *tentative.entry(chosen.clone()).or_default() += 1;
        assignments.push(Assignment {
            task: task.clone(),
            robot: chosen.clone(),
        });
        decisions.push(PlanningDecision {
            task: task.id.clone(),
            candidates,
            chosen,
        });
    }
    let plan = VerifiedPlan {
        blueprint_id: pb.id.clone(),
        request_id: request_id.clone(),
        assignments,
    };
    Ok((plan, decisions))
}

/// Planner agent: runs the planning process for every blueprint it receives.
#[derive(Debug, Clone)]
pub struct Planner {
    def: ProcessDefinition,
    decisions: Vec<(RequestId, Vec<PlanningDecision>)>,
}

pub const PROCESS: &str = include_str!("../processes/pln.process");

pub const ACTIONS: &[&str] = &[
    "pln.receive_blueprint",
    "pln.match_tasks",
    "pln.confirm_plan",
    "pln.send_verified_plan",
    "pln.record_insufficient_robots",
    "pln.record_capability_mismatch",
    "pln.report_plan_failure",
];

impl Planner {
    pub fn new() -> Result<Self, ControllerError> {
        Ok(Planner {
            def: controller::load("pln", PROCESS, ACTIONS)?,
            decisions: Vec::new(),
        })
    }

    pub fn handle(&mut self, msg: &AclMessage, kb: &KnowledgeBase) -> Result<Vec<Effect>, ControllerError> {
        let Content::Blueprint(pb) = &msg.content else {
            log::warn!("planner ignored {} from {}", msg.content.kind(), msg.sender);
            return Ok(Vec::new());
        };
        let mut run = PlnRun {
            msg,
            pb,
            request_id: RequestId::new(msg.conversation_id.as_str()),
            registry: Vec::new(),
            result: None,
            failure: None,
            effects: Vec::new(),
            kb,
        };
        controller::execute("pln", &self.def, &mut run)?;
        if let Some(Ok((_, decisions))) = run.result {
            self.decisions.push((run.request_id, decisions));
        }
        Ok(run.effects)
    }

    /// Every successful planning run so far, with its per-task decisions.
    pub fn decisions(&self) -> &[(RequestId, Vec<PlanningDecision>)] {
        &self.decisions
    }
}

struct PlnRun<'a> {
    msg: &'a AclMessage,
    pb: &'a PlanBlueprint,
    request_id: RequestId,
    kb: &'a KnowledgeBase,
    registry: Vec<Candidate>,
    result: Option<PlanResult>,
    failure: Option<PlanFailure>,
    effects: Vec<Effect>,
}

impl PlnRun<'_> {
    fn reply(&mut self, performative: Performative, receiver: &str, content: Content) {
        self.effects.push(Effect::Send(AclMessage::new(
            performative,
            names::PLN,
            receiver,
            self.msg.conversation_id.as_str(),
            content,
        )));
    }

    fn plan(&self) -> Result<&VerifiedPlan, String> {
        match &self.result {
            Some(Ok((plan, _))) => Ok(plan),
            _ => Err("no verified plan".into()),
        }
    }
}

impl ActionHandler for PlnRun<'_> {
    fn perform(&mut self, action: &str, env: &mut ConditionEnv) -> Result<(), String> {
        match action {
            "pln.receive_blueprint" => {
                self.registry = registry_snapshot(self.kb);
                let enough = self.registry.len() >= MIN_ROBOTS;
                set(env, "enough_robots", enough);
                set(env, "too_few_robots", !enough);
            }
            "pln.match_tasks" => {
                let result = build_verified_plan(self.pb, &self.request_id, &self.registry);
                set(env, "all_matched", result.is_ok());
                set(env, "capability_mismatch", result.is_err());
                self.result = Some(result);
            }
            "pln.confirm_plan" => {
                let accepted = PlanAccepted {
                    request_id: self.request_id.clone(),
                    blueprint_id: self.pb.id.clone(),
                    tasks: self.pb.tasks.len(),
                };
                let to = self.msg.sender.name().to_owned();
                self.reply(Performative::Agree, &to, Content::PlanAccepted(accepted));
            }
            "pln.send_verified_plan" => {
                let plan = self.plan()?.clone();
                self.reply(Performative::Request, names::RBM, Content::VerifiedPlan(plan));
            }
            "pln.record_insufficient_robots" => {
                self.failure = Some(PlanFailure::InsufficientRobots {
                    registered: self.registry.len(),
                });
            }
            "pln.record_capability_mismatch" => match &self.result {
                Some(Err(f)) => self.failure = Some(f.clone()),
                _ => return Err("no capability mismatch recorded".into()),
            },
            "pln.report_plan_failure" => {
                let failure = self.failure.clone().ok_or("no failure recorded")?;
                log::debug!("plan for {} failed: {:?}", self.request_id, failure);
                let report = PlanFailureReport {
                    request_id: self.request_id.clone(),
                    failure,
                };
                let to = self.msg.sender.name().to_owned();
                self.reply(Performative::Failure, &to, Content::PlanFailure(report));
            }
            other => return Err(format!("no handler for {other}")),
        }
        Ok(())
    }
}
