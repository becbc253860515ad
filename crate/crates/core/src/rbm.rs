//! Robots manager and the simulated robots it drives.
//!
//! The manager executes verified plans one task at a time, keeps the robot
//! registry's lifecycle states current and reports every lifecycle change to
//! the monitor. Robots are plain state machines whose work is a scheduled
//! completion timer.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bus::{
    names, AclMessage, CommandEffect, CommandResult, Content, ExecutionReport, Performative, RegistryCommand,
    Rejection, RejectionCode, RobotStatus, TaskAssignment, TaskFeedback,
};
use crate::controller::{self, route, set, BusOp, ControllerError, Effect, Timer};
use crate::domain::{FailureReason, RequestId, RobotId, TaskId, VerifiedPlan};
use crate::kb::{KbError, KnowledgeBase, Lifecycle};
use crate::time::SimTime;
use crate::workflow::{ActionHandler, ConditionEnv, ProcessDefinition};

pub const PROCESS: &str = include_str!("../processes/rbm.process");

pub const ACTIONS: &[&str] = &[
    "rbm.classify",
    "rbm.accept_plan",
    "rbm.release_robot",
    "rbm.abandon_task",
    "rbm.credit_history",
    "rbm.apply_deferred_deregistration",
    "rbm.record_task_failure",
    "rbm.evaluate_progress",
    "rbm.advance_cursor",
    "rbm.report_plan_success",
    "rbm.register_robot",
    "rbm.deregister_robot",
    "rbm.ignore_stale",
    "rbm.check_robot",
    "rbm.assign_task",
    "rbm.arm_task_deadline",
    "rbm.record_robot_gone",
    "rbm.report_plan_failure",
];

const ROUTES: &[&str] = &[
    "is_plan",
    "is_task_feedback",
    "is_task_timeout",
    "is_registration",
    "is_deregistration",
    "is_stale",
];

/// What happens to a robot asked to leave while executing a task.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeregistrationMode {
    /// Leave once the current task ends.
    #[default]
    Deferred,
    /// Abandon the task, fail its plan, and leave at once.
    FailFast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RbmConfig {
    pub task_timeout_ms: u64,
    pub deregistration: DeregistrationMode,
}

impl Default for RbmConfig {
    fn default() -> Self {
        RbmConfig {
            task_timeout_ms: 60_000,
            deregistration: DeregistrationMode::Deferred,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanExecution {
    pub plan: VerifiedPlan,
    /// Index of the task in flight (or about to be dispatched).
    pub cursor: usize,
    pub deadline: Option<SimTime>,
    #[serde(skip)]
    epoch: u64,
    /// Whether the robot at the cursor was marked controlled for this task.
    #[serde(skip)]
    started: bool,
    #[serde(skip)]
    failure: Option<FailureReason>,
}

impl PlanExecution {
    fn robot(&self) -> &RobotId {
        &self.plan.assignments[self.cursor].robot
    }

    fn task(&self) -> &TaskId {
        &self.plan.assignments[self.cursor].task.id
    }

    fn conversation(&self) -> String {
        task_conversation(&self.plan.request_id, self.task())
    }
}

pub fn task_conversation(request: &RequestId, task: &TaskId) -> String {
    format!("{request}/{task}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RbmInput {
    Message(AclMessage),
    Timer(Timer),
    /// A message this manager sent could not be delivered.
    Undeliverable(AclMessage),
}

#[derive(Debug, Clone, Default)]
struct RbmState {
    plans: BTreeMap<RequestId, PlanExecution>,
    pending_deregistration: BTreeSet<RobotId>,
}

#[derive(Debug, Clone)]
pub struct RobotsManager {
    def: ProcessDefinition,
    config: RbmConfig,
    state: RbmState,
}

impl RobotsManager {
    pub fn new(config: RbmConfig) -> Result<Self, ControllerError> {
        Ok(RobotsManager {
            def: controller::load("rbm", PROCESS, ACTIONS)?,
            config,
            state: RbmState::default(),
        })
    }

    pub fn handle(
        &mut self,
        input: &RbmInput,
        now: SimTime,
        kb: &mut KnowledgeBase,
        fleet: &mut RobotFleet,
    ) -> Result<Vec<Effect>, ControllerError> {
        let mut run = RbmRun {
            state: &mut self.state,
            config: &self.config,
            kb,
            fleet,
            now,
            input,
            effects: Vec::new(),
            plan: None,
            robot: None,
            succeeded: false,
        };
        controller::execute("rbm", &self.def, &mut run)?;
        Ok(run.effects)
    }

    pub fn plans(&self) -> impl Iterator<Item = &PlanExecution> {
        self.state.plans.values()
    }

    pub fn deregistration_pending(&self, robot: &RobotId) -> bool {
        self.state.pending_deregistration.contains(robot)
    }

    pub fn pending_deregistrations(&self) -> &BTreeSet<RobotId> {
        &self.state.pending_deregistration
    }
}

/// Status notice for `robot` as currently recorded.
pub fn robot_status(kb: &KnowledgeBase, robot: &RobotId, pending: bool) -> Option<RobotStatus> {
    kb.robot(robot).map(|r| RobotStatus {
        robot: r.id.clone(),
        state: r.lifecycle,
        capabilities: r.capabilities.clone(),
        tasks_completed: r.tasks_completed,
        deregistration_pending: pending,
    })
}

fn rejection_code(e: &KbError) -> RejectionCode {
    match e {
        KbError::Capacity { .. } => RejectionCode::Capacity,
        KbError::AlreadyRegistered(_) => RejectionCode::Duplicate,
        KbError::UnknownRobot(_) => RejectionCode::Unknown,
        KbError::NotRegistered(_) | KbError::Idle(_) => RejectionCode::State,
        KbError::Busy(_) => RejectionCode::Busy,
        KbError::InvalidBlueprint(_) => RejectionCode::Invalid,
    }
}

struct RbmRun<'a> {
    state: &'a mut RbmState,
    config: &'a RbmConfig,
    kb: &'a mut KnowledgeBase,
    fleet: &'a mut RobotFleet,
    now: SimTime,
    input: &'a RbmInput,
    effects: Vec<Effect>,
    plan: Option<RequestId>,
    robot: Option<RobotId>,
    succeeded: bool,
}

impl RbmRun<'_> {
    fn send(&mut self, performative: Performative, receiver: &str, conversation: &str, content: Content) {
        self.effects.push(Effect::Send(AclMessage::new(
            performative,
            names::RBM,
            receiver,
            conversation,
            content,
        )));
    }

    fn status(&mut self, robot: &RobotId) {
        let pending = self.state.pending_deregistration.contains(robot);
        if let Some(s) = robot_status(self.kb, robot, pending) {
            let conv = format!("status/{robot}");
            self.send(Performative::Inform, names::MONITOR, &conv, Content::RobotStatus(s));
        }
    }

    fn plan_mut(&mut self) -> Result<&mut PlanExecution, String> {
        let id = self.plan.clone().ok_or("no subject plan")?;
        self.state
            .plans
            .get_mut(&id)
            .ok_or_else(|| format!("unknown plan {id}"))
    }

    fn robot(&self) -> Result<RobotId, String> {
        self.robot.clone().ok_or_else(|| "no subject robot".into())
    }

    fn registry_message(&self) -> Result<(&AclMessage, &RegistryCommand), String> {
        match self.input {
            RbmInput::Message(m) => match &m.content {
                Content::Registry(cmd) => Ok((m, cmd)),
                _ => Err("not a registry command".into()),
            },
            _ => Err("not a message".into()),
        }
    }

    /// Plan whose in-flight task uses `conversation`.
    fn plan_for_conversation(&self, conversation: &str) -> Option<RequestId> {
        self.state
            .plans
            .iter()
            .find(|(_, p)| p.conversation() == conversation)
            .map(|(id, _)| id.clone())
    }

    fn classify(&mut self, env: &mut ConditionEnv) {
        let task_ended = |run: &mut Self, conversation: &str, ok: bool| match run.plan_for_conversation(conversation) {
            Some(id) => {
                run.robot = Some(run.state.plans[&id].robot().clone());
                run.plan = Some(id);
                run.succeeded = ok;
                "is_task_feedback"
            }
            None => "is_stale",
        };
        let on = match self.input {
            RbmInput::Message(msg) => match (&msg.content, msg.performative) {
                (Content::VerifiedPlan(pv), Performative::Request) => {
                    if self.state.plans.contains_key(&pv.request_id) {
                        "is_stale"
                    } else {
                        self.plan = Some(pv.request_id.clone());
                        "is_plan"
                    }
                }
                (Content::TaskFeedback(fb), p) => {
                    let conv = task_conversation(&fb.request_id, &fb.task_id);
                    let from_robot = msg.sender.name() == fb.robot.as_str();
                    if from_robot && conv == msg.conversation_id {
                        task_ended(self, &conv, p == Performative::Inform)
                    } else {
                        "is_stale"
                    }
                }
                (Content::Rejection(_), Performative::Refuse) => task_ended(self, &msg.conversation_id, false),
                (Content::Registry(RegistryCommand::Register { robot, .. }), _) => {
                    self.robot = Some(robot.clone());
                    "is_registration"
                }
                (Content::Registry(RegistryCommand::Deregister { robot }), _) => {
                    self.robot = Some(robot.clone());
                    "is_deregistration"
                }
                _ => "is_stale",
            },
            RbmInput::Undeliverable(msg) => task_ended(self, &msg.conversation_id, false),
            RbmInput::Timer(Timer::TaskDeadline { request, task, epoch }) => match self.state.plans.get(request) {
                Some(p) if p.task() == task && p.epoch == *epoch => {
                    self.robot = Some(p.robot().clone());
                    self.plan = Some(request.clone());
                    "is_task_timeout"
                }
                _ => "is_stale",
            },
            RbmInput::Timer(_) => "is_stale",
        };
        route(env, ROUTES, Some(on));
    }

    fn accept_plan(&mut self) -> Result<(), String> {
        let RbmInput::Message(AclMessage {
            content: Content::VerifiedPlan(pv),
            ..
        }) = self.input
        else {
            return Err("not a verified plan".into());
        };
        if pv.assignments.is_empty() {
            return Err(format!("verified plan for {} has no assignments", pv.request_id));
        }
        self.state.plans.insert(
            pv.request_id.clone(),
            PlanExecution {
                plan: pv.clone(),
                cursor: 0,
                deadline: None,
                epoch: 0,
                started: false,
                failure: None,
            },
        );
        Ok(())
    }

    /// Ends the robot's part in the in-flight task; shared by feedback and
    /// abandonment.
    fn end_task(&mut self, env: &mut ConditionEnv, failure: Option<FailureReason>) -> Result<(), String> {
        let robot = self.robot()?;
        let now = self.now;
        let plan = self.plan_mut()?;
        let started = std::mem::replace(&mut plan.started, false);
        plan.epoch += 1;
        plan.deadline = None;
        if failure.is_some() {
            plan.failure = failure;
        }
        if started {
            self.kb.finish_task(&robot, now).map_err(|e| e.to_string())?;
            self.status(&robot);
        }
        let due = started && self.state.pending_deregistration.contains(&robot);
        set(env, "task_succeeded", failure.is_none());
        set(env, "task_failed", failure.is_some());
        set(env, "deregistration_due", due);
        Ok(())
    }

    fn release_robot(&mut self, env: &mut ConditionEnv) -> Result<(), String> {
        let failure = (!self.succeeded).then_some(FailureReason::TaskFailed);
        self.end_task(env, failure)
    }

    fn abandon_task(&mut self, env: &mut ConditionEnv) -> Result<(), String> {
        let robot = self.robot()?;
        log::info!("task {} on {robot} timed out", self.plan_mut()?.conversation());
        self.fleet.abandon(&robot);
        self.end_task(env, Some(FailureReason::TaskTimeout))
    }

    fn leave(&mut self, robot: &RobotId) -> Result<(), String> {
        self.kb.deregister_robot(robot, self.now).map_err(|e| e.to_string())?;
        self.state.pending_deregistration.remove(robot);
        self.effects.push(Effect::Bus(BusOp::LeaveRobot(robot.clone())));
        self.status(robot);
        Ok(())
    }

    fn evaluate_progress(&mut self, env: &mut ConditionEnv) -> Result<(), String> {
        let on = match self.plan.as_ref().and_then(|id| self.state.plans.get(id)) {
            None => "no_plan",
            Some(p) if p.failure.is_some() => "plan_failed",
            Some(p) if p.cursor + 1 < p.plan.assignments.len() => "has_next_task",
            Some(_) => "plan_complete",
        };
        route(
            env,
            &["no_plan", "plan_failed", "has_next_task", "plan_complete"],
            Some(on),
        );
        Ok(())
    }

    fn report_plan(&mut self, failure: Option<FailureReason>) -> Result<(), String> {
        let id = self.plan.clone().ok_or("no subject plan")?;
        self.state.plans.remove(&id);
        let performative = if failure.is_some() {
            Performative::Failure
        } else {
            Performative::Inform
        };
        let report = ExecutionReport {
            request_id: id.clone(),
            failure,
        };
        self.send(performative, names::RQM, id.as_str(), Content::Execution(report));
        Ok(())
    }

    fn reply(&mut self, result: Result<CommandResult, Rejection>) -> Result<(), String> {
        let (msg, _) = self.registry_message()?;
        let (to, conv) = (msg.sender.name().to_owned(), msg.conversation_id.clone());
        match result {
            Ok(r) => self.send(Performative::Agree, &to, &conv, Content::CommandResult(r)),
            Err(r) => self.send(Performative::Refuse, &to, &conv, Content::Rejection(r)),
        }
        Ok(())
    }

    fn register_robot(&mut self) -> Result<(), String> {
        let (_, cmd) = self.registry_message()?;
        let RegistryCommand::Register { robot, capabilities } = cmd.clone() else {
            return Err("not a registration".into());
        };
        match self.kb.register_robot(&robot, capabilities, self.now) {
            Ok(()) => {
                self.effects.push(Effect::Bus(BusOp::JoinRobot(robot.clone())));
                self.status(&robot);
                self.reply(Ok(CommandResult {
                    effect: CommandEffect::Applied,
                    detail: format!("robot {robot} registered"),
                }))
            }
            Err(e) => {
                log::info!("registration of {robot} refused: {e}");
                self.reply(Err(Rejection {
                    subject: robot.to_string(),
                    code: rejection_code(&e),
                    reason: e.to_string(),
                }))
            }
        }
    }

    fn deregister_robot(&mut self, env: &mut ConditionEnv) -> Result<(), String> {
        let robot = self.robot()?;
        let mut interrupted = false;
        let state = self.kb.robot(&robot).map(|r| r.lifecycle);
        let result = match state {
            None => Err(KbError::UnknownRobot(robot.clone())),
            Some(Lifecycle::Unregistered) => Err(KbError::NotRegistered(robot.clone())),
            Some(Lifecycle::Uncontrolled) => self.leave(&robot).map(|()| CommandEffect::Applied).map_err(|e| {
                log::error!("{e}");
                KbError::NotRegistered(robot.clone())
            }),
            Some(Lifecycle::Controlled) if self.state.pending_deregistration.contains(&robot) => {
                Ok(CommandEffect::Deferred)
            }
            Some(Lifecycle::Controlled) => match self.config.deregistration {
                DeregistrationMode::Deferred => {
                    self.state.pending_deregistration.insert(robot.clone());
                    self.status(&robot);
                    Ok(CommandEffect::Deferred)
                }
                DeregistrationMode::FailFast => {
                    let plan = self
                        .state
                        .plans
                        .iter()
                        .find(|(_, p)| p.started && p.robot() == &robot)
                        .map(|(id, _)| id.clone());
                    self.fleet.abandon(&robot);
                    if let Some(id) = plan {
                        self.plan = Some(id);
                        let p = self.plan_mut()?;
                        p.started = false;
                        p.epoch += 1;
                        p.failure = Some(FailureReason::TaskFailed);
                        interrupted = true;
                    }
                    self.kb.finish_task(&robot, self.now).map_err(|e| e.to_string())?;
                    self.leave(&robot)?;
                    Ok(CommandEffect::Applied)
                }
            },
        };
        set(env, "registry_done", !interrupted);
        set(env, "plan_interrupted", interrupted);
        match result {
            Ok(effect) => self.reply(Ok(CommandResult {
                effect,
                detail: match effect {
                    CommandEffect::Deferred => format!("robot {robot} leaves when its task ends"),
                    _ => format!("robot {robot} deregistered"),
                },
            })),
            Err(e) => self.reply(Err(Rejection {
                subject: robot.to_string(),
                code: rejection_code(&e),
                reason: e.to_string(),
            })),
        }
    }

    fn check_robot(&mut self, env: &mut ConditionEnv) -> Result<(), String> {
        let robot = self.plan_mut()?.robot().clone();
        let ready = self.kb.robot(&robot).is_some_and(|r| r.lifecycle.is_registered())
            && !self.state.pending_deregistration.contains(&robot);
        set(env, "robot_ready", ready);
        set(env, "robot_unavailable", !ready);
        self.robot = Some(robot);
        Ok(())
    }

    fn assign_task(&mut self) -> Result<(), String> {
        let now = self.now;
        let plan = self.plan_mut()?;
        let assignment = plan.plan.assignments[plan.cursor].clone();
        let conv = plan.conversation();
        let request_id = plan.plan.request_id.clone();
        let robot = assignment.robot.clone();
        // A robot busy with another plan is still asked; it will refuse.
        let started = self.kb.start_task(&robot, assignment.task.id.clone(), now).is_ok();
        self.plan_mut()?.started = started;
        if started {
            self.status(&robot);
        }
        let content = Content::TaskAssignment(TaskAssignment {
            request_id,
            task: assignment.task,
            robot: robot.clone(),
        });
        self.send(Performative::Request, robot.as_str(), &conv, content);
        Ok(())
    }

    fn arm_task_deadline(&mut self) -> Result<(), String> {
        let at = self.now.after(self.config.task_timeout_ms);
        let plan = self.plan_mut()?;
        plan.epoch += 1;
        plan.deadline = Some(at);
        let timer = Timer::TaskDeadline {
            request: plan.plan.request_id.clone(),
            task: plan.task().clone(),
            epoch: plan.epoch,
        };
        self.effects.push(Effect::Timer { at, timer });
        Ok(())
    }
}

impl ActionHandler for RbmRun<'_> {
    fn perform(&mut self, action: &str, env: &mut ConditionEnv) -> Result<(), String> {
        match action {
            "rbm.classify" => self.classify(env),
            "rbm.accept_plan" => self.accept_plan()?,
            "rbm.release_robot" => self.release_robot(env)?,
            "rbm.abandon_task" => self.abandon_task(env)?,
            "rbm.credit_history" => {
                let robot = self.robot()?;
                self.kb.increment_history(&robot).map_err(|e| e.to_string())?;
                self.status(&robot);
            }
            "rbm.apply_deferred_deregistration" => {
                let robot = self.robot()?;
                self.leave(&robot)?;
            }
            // The reason was recorded on the plan when the task ended.
            "rbm.record_task_failure" => {}
            "rbm.evaluate_progress" => self.evaluate_progress(env)?,
            "rbm.advance_cursor" => self.plan_mut()?.cursor += 1,
            "rbm.report_plan_success" => self.report_plan(None)?,
            "rbm.register_robot" => self.register_robot()?,
            "rbm.deregister_robot" => self.deregister_robot(env)?,
            "rbm.ignore_stale" => log::debug!("robots manager ignored stale input {:?}", self.input),
            "rbm.check_robot" => self.check_robot(env)?,
            "rbm.assign_task" => self.assign_task()?,
            "rbm.arm_task_deadline" => self.arm_task_deadline()?,
            "rbm.record_robot_gone" => {
                let plan = self.plan_mut()?;
                log::info!("robot {} for {} is unavailable", plan.robot(), plan.conversation());
                plan.failure = Some(FailureReason::TaskFailed);
            }
            "rbm.report_plan_failure" => {
                let failure = self.plan_mut()?.failure.unwrap_or(FailureReason::TaskFailed);
                self.report_plan(Some(failure))?;
            }
            other => return Err(format!("no handler for {other}")),
        }
        Ok(())
    }
}

/// Fault injection knobs of one simulated robot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultProfile {
    /// Chance that an accepted task never reports back.
    #[serde(default)]
    pub stall_probability: f64,
    /// Chance that an accepted task reports failure.
    #[serde(default)]
    pub fail_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Job {
    assignment: TaskAssignment,
    conversation: String,
    fails: bool,
}

#[derive(Debug, Clone, Default)]
struct SimulatedRobot {
    faults: FaultProfile,
    epoch: u64,
    job: Option<Job>,
}

/// The simulated robots. Work is a `RobotDone` timer; stalled work has none.
#[derive(Debug, Clone)]
pub struct RobotFleet {
    robots: BTreeMap<RobotId, SimulatedRobot>,
    base_ms: u64,
    jitter_ms: u64,
}

impl RobotFleet {
    pub fn new(base_ms: u64, jitter_ms: u64) -> Self {
        RobotFleet {
            robots: BTreeMap::new(),
            base_ms,
            jitter_ms,
        }
    }

    pub fn set_faults(&mut self, robot: RobotId, faults: FaultProfile) {
        self.robots.entry(robot).or_default().faults = faults;
    }

    pub fn is_busy(&self, robot: &RobotId) -> bool {
        self.robots.get(robot).is_some_and(|r| r.job.is_some())
    }

    /// Handles a task assignment delivered to a robot.
    ///
    /// Every accepted assignment draws exactly one duration value from
    /// `durations` and two values from `faults`, so fault knobs never shift
    /// the duration sequence.
    pub fn on_assignment<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        &mut self,
        msg: &AclMessage,
        now: SimTime,
        durations: &mut R1,
        faults: &mut R2,
    ) -> Vec<Effect> {
        let robot_id = RobotId::new(msg.receiver.name());
        let Content::TaskAssignment(assignment) = &msg.content else {
            log::warn!("robot {robot_id} ignored {}", msg.content.kind());
            return Vec::new();
        };
        let robot = self.robots.entry(robot_id.clone()).or_default();
        if robot.job.is_some() {
            let refusal = Rejection {
                subject: assignment.task.id.to_string(),
                code: RejectionCode::Busy,
                reason: format!("robot {robot_id} is executing another task"),
            };
            return vec![Effect::Send(AclMessage::new(
                Performative::Refuse,
                robot_id.as_str(),
                msg.sender.name(),
                msg.conversation_id.as_str(),
                Content::Rejection(refusal),
            ))];
        }
        let duration = self.base_ms + durations.random_range(0..=self.jitter_ms);
        let stalls = faults.random::<f64>() < robot.faults.stall_probability;
        let fails = faults.random::<f64>() < robot.faults.fail_probability;
        robot.epoch += 1;
        robot.job = Some(Job {
            assignment: assignment.clone(),
            conversation: msg.conversation_id.clone(),
            fails,
        });
        if stalls {
            log::debug!("robot {robot_id} stalls on {}", msg.conversation_id);
            return Vec::new();
        }
        vec![Effect::Timer {
            at: now.after(duration),
            timer: Timer::RobotDone {
                robot: robot_id,
                epoch: robot.epoch,
            },
        }]
    }

    /// Finishes the robot's job if `epoch` is still current.
    pub fn on_done(&mut self, robot_id: &RobotId, epoch: u64) -> Vec<Effect> {
        let Some(robot) = self.robots.get_mut(robot_id) else {
            return Vec::new();
        };
        if robot.epoch != epoch {
            return Vec::new();
        }
        let Some(job) = robot.job.take() else {
            return Vec::new();
        };
        let feedback = TaskFeedback {
            request_id: job.assignment.request_id.clone(),
            task_id: job.assignment.task.id.clone(),
            robot: robot_id.clone(),
        };
        let performative = if job.fails {
            Performative::Failure
        } else {
            Performative::Inform
        };
        vec![Effect::Send(AclMessage::new(
            performative,
            robot_id.as_str(),
            names::RBM,
            job.conversation,
            Content::TaskFeedback(feedback),
        ))]
    }

    /// Drops the robot's job; a pending completion for it is ignored.
    pub fn abandon(&mut self, robot_id: &RobotId) {
        if let Some(robot) = self.robots.get_mut(robot_id) {
            robot.epoch += 1;
            robot.job = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{caps, example_blueprint, Assignment, BlueprintId, OutcomeStatus};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct World {
        rbm: RobotsManager,
        kb: KnowledgeBase,
        fleet: RobotFleet,
        rng: ChaCha8Rng,
        now: SimTime,
    }

    impl World {
        fn new(mode: DeregistrationMode) -> Self {
            let mut kb = KnowledgeBase::default();
            for (id, c, h) in [("R1", vec!["C1", "C2", "C3", "C4"], 9), ("R3", vec!["C2", "C5"], 11)] {
                kb.add_known_robot(RobotId::new(id), caps(c.clone()), h, SimTime::ZERO);
                kb.register_robot(&RobotId::new(id), caps(c), SimTime::ZERO).unwrap();
            }
            World {
                rbm: RobotsManager::new(RbmConfig {
                    task_timeout_ms: 60_000,
                    deregistration: mode,
                })
                .unwrap(),
                kb,
                fleet: RobotFleet::new(20_000, 0),
                rng: ChaCha8Rng::seed_from_u64(1),
                now: SimTime::ZERO,
            }
        }

        fn rbm(&mut self, input: RbmInput) -> Vec<Effect> {
            self.rbm
                .handle(&input, self.now, &mut self.kb, &mut self.fleet)
                .unwrap()
        }

        fn msg(&mut self, m: AclMessage) -> Vec<Effect> {
            self.rbm(RbmInput::Message(m))
        }

        /// Delivers `effects` until quiescent, advancing time for timers.
        fn drive(&mut self, effects: Vec<Effect>, log: &mut Vec<AclMessage>) {
            let mut timers: Vec<(SimTime, Timer)> = Vec::new();
            let mut queue: std::collections::VecDeque<Effect> = effects.into();
            loop {
                while let Some(e) = queue.pop_front() {
                    match e {
                        Effect::Send(m) => {
                            log.push(m.clone());
                            let r = m.receiver.name().to_owned();
                            let next = if r == names::RBM {
                                self.msg(m)
                            } else if r.starts_with('R') {
                                let mut f = ChaCha8Rng::seed_from_u64(2);
                                self.fleet.on_assignment(&m, self.now, &mut self.rng, &mut f)
                            } else {
                                Vec::new()
                            };
                            queue.extend(next);
                        }
                        Effect::Timer { at, timer } => timers.push((at, timer)),
                        Effect::Bus(_) => {}
                    }
                }
                timers.sort_by_key(|(at, t)| (*at, matches!(t, Timer::TaskDeadline { .. })));
                if timers.is_empty() {
                    return;
                }
                let (at, timer) = timers.remove(0);
                self.now = at;
                let next = match &timer {
                    Timer::RobotDone { robot, epoch } => self.fleet.on_done(robot, *epoch),
                    _ => self.rbm(RbmInput::Timer(timer)),
                };
                queue.extend(next);
            }
        }
    }

    fn pv() -> VerifiedPlan {
        let pb = example_blueprint();
        let robots = ["R1", "R1", "R3"];
        VerifiedPlan {
            blueprint_id: BlueprintId::new("Pb2"),
            request_id: RequestId::new("req-1"),
            assignments: pb
                .tasks
                .into_iter()
                .zip(robots)
                .map(|(task, r)| Assignment {
                    task,
                    robot: RobotId::new(r),
                })
                .collect(),
        }
    }

    fn plan_msg() -> AclMessage {
        AclMessage::new(
            Performative::Request,
            names::PLN,
            names::RBM,
            "req-1",
            Content::VerifiedPlan(pv()),
        )
    }

    fn registry(cmd: RegistryCommand) -> AclMessage {
        AclMessage::new(
            Performative::Request,
            names::OPERATOR,
            names::RBM,
            "op-1",
            Content::Registry(cmd),
        )
    }

    fn execution(log: &[AclMessage]) -> Vec<Option<FailureReason>> {
        log.iter()
            .filter_map(|m| match &m.content {
                Content::Execution(r) => Some(r.failure),
                _ => None,
            })
            .collect()
    }

    fn assignments(log: &[AclMessage]) -> Vec<(String, String)> {
        log.iter()
            .filter_map(|m| match &m.content {
                Content::TaskAssignment(a) => Some((a.task.id.to_string(), a.robot.to_string())),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn process_binds_every_action() {
        let def = crate::workflow::parse_process(PROCESS).unwrap();
        let mut expected = ACTIONS.to_vec();
        expected.sort_unstable();
        assert_eq!(def.action_keys().into_iter().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn plan_runs_sequentially_and_succeeds() {
        let mut w = World::new(DeregistrationMode::Deferred);
        let fx = w.msg(plan_msg());
        let mut log = Vec::new();
        w.drive(fx, &mut log);
        assert_eq!(
            assignments(&log),
            vec![
                ("T1".into(), "R1".into()),
                ("T2".into(), "R1".into()),
                ("T3".into(), "R3".into())
            ]
        );
        assert_eq!(execution(&log), vec![None]);
        assert_eq!(w.kb.robot(&RobotId::new("R1")).unwrap().tasks_completed, 11);
        assert_eq!(w.kb.robot(&RobotId::new("R3")).unwrap().tasks_completed, 12);
        let r1 = w.kb.robot(&RobotId::new("R1")).unwrap();
        assert_eq!(r1.clock.totals_at(w.now).controlled_ms, 40_000);
        let r3 = w.kb.robot(&RobotId::new("R3")).unwrap();
        assert_eq!(r3.clock.totals_at(w.now).controlled_ms, 20_000);
        assert_eq!(w.rbm.plans().count(), 0);
    }

    #[test]
    fn failure_stops_the_plan() {
        let mut w = World::new(DeregistrationMode::Deferred);
        w.fleet.set_faults(
            RobotId::new("R1"),
            FaultProfile {
                stall_probability: 0.0,
                fail_probability: 1.0,
            },
        );
        let fx = w.msg(plan_msg());
        let mut log = Vec::new();
        w.drive(fx, &mut log);
        assert_eq!(assignments(&log).len(), 1);
        assert_eq!(execution(&log), vec![Some(FailureReason::TaskFailed)]);
        assert_eq!(w.kb.robot(&RobotId::new("R1")).unwrap().tasks_completed, 9);
        assert_eq!(
            w.kb.robot(&RobotId::new("R1")).unwrap().lifecycle,
            Lifecycle::Uncontrolled
        );
    }

    #[test]
    fn stall_times_out() {
        let mut w = World::new(DeregistrationMode::Deferred);
        w.fleet.set_faults(
            RobotId::new("R1"),
            FaultProfile {
                stall_probability: 1.0,
                fail_probability: 0.0,
            },
        );
        let fx = w.msg(plan_msg());
        let mut log = Vec::new();
        w.drive(fx, &mut log);
        assert_eq!(execution(&log), vec![Some(FailureReason::TaskTimeout)]);
        assert_eq!(w.now, SimTime::from_secs(60));
        assert!(!w.fleet.is_busy(&RobotId::new("R1")));
        assert_eq!(
            w.kb.robot(&RobotId::new("R1")).unwrap().lifecycle,
            Lifecycle::Uncontrolled
        );
    }

    #[test]
    fn deferred_deregistration_waits_for_task() {
        let mut w = World::new(DeregistrationMode::Deferred);
        let mut fx = w.msg(plan_msg());
        let mut log = Vec::new();
        // Deliver the assignment only.
        let Effect::Send(assign) = fx.remove(1) else { panic!() };
        let mut f = ChaCha8Rng::seed_from_u64(2);
        let done = w.fleet.on_assignment(&assign, w.now, &mut w.rng, &mut f);
        w.now = SimTime::from_secs(5);
        let reply = w.msg(registry(RegistryCommand::Deregister {
            robot: RobotId::new("R1"),
        }));
        assert!(reply.iter().any(|e| matches!(e, Effect::Send(m) if matches!(&m.content, Content::CommandResult(r) if r.effect == CommandEffect::Deferred))));
        assert!(w.rbm.deregistration_pending(&RobotId::new("R1")));
        assert_eq!(
            w.kb.robot(&RobotId::new("R1")).unwrap().lifecycle,
            Lifecycle::Controlled
        );
        let mut rest = fx;
        rest.extend(done);
        w.drive(rest, &mut log);
        // T1 completed, R1 left, T2 could not be dispatched.
        assert_eq!(
            w.kb.robot(&RobotId::new("R1")).unwrap().lifecycle,
            Lifecycle::Unregistered
        );
        assert_eq!(w.kb.robot(&RobotId::new("R1")).unwrap().tasks_completed, 10);
        assert_eq!(execution(&log), vec![Some(FailureReason::TaskFailed)]);
    }

    #[test]
    fn fail_fast_deregistration_interrupts_plan() {
        let mut w = World::new(DeregistrationMode::FailFast);
        w.msg(plan_msg());
        w.now = SimTime::from_secs(5);
        let fx = w.msg(registry(RegistryCommand::Deregister {
            robot: RobotId::new("R1"),
        }));
        let kinds: Vec<_> = fx
            .iter()
            .filter_map(|e| match e {
                Effect::Send(m) => Some(m.content.kind()),
                _ => None,
            })
            .collect();
        assert_eq!(kinds, vec!["robot_status", "command_result", "execution"]);
        assert_eq!(
            w.kb.robot(&RobotId::new("R1")).unwrap().lifecycle,
            Lifecycle::Unregistered
        );
        assert_eq!(
            w.kb.robot(&RobotId::new("R1"))
                .unwrap()
                .clock
                .totals_at(w.now)
                .controlled_ms,
            5_000
        );
    }

    #[test]
    fn gone_robot_fails_plan_immediately() {
        let mut w = World::new(DeregistrationMode::Deferred);
        w.kb.deregister_robot(&RobotId::new("R1"), SimTime::ZERO).unwrap();
        let fx = w.msg(plan_msg());
        let kinds: Vec<_> = fx
            .iter()
            .filter_map(|e| match e {
                Effect::Send(m) => Some((m.performative, m.content.kind())),
                _ => None,
            })
            .collect();
        assert_eq!(kinds, vec![(Performative::Failure, "execution")]);
    }

    #[test]
    fn registry_commands() {
        let mut w = World::new(DeregistrationMode::Deferred);
        let reg = |id: &str| {
            registry(RegistryCommand::Register {
                robot: RobotId::new(id),
                capabilities: caps(["C2", "C4"]),
            })
        };
        let code = |fx: &[Effect]| {
            fx.iter().find_map(|e| match e {
                Effect::Send(m) => match &m.content {
                    Content::Rejection(r) => Some(r.code),
                    _ => None,
                },
                _ => None,
            })
        };
        let fx = w.msg(reg("R2"));
        assert!(fx.contains(&Effect::Bus(BusOp::JoinRobot(RobotId::new("R2")))));
        assert_eq!(code(&w.msg(reg("R2"))), Some(RejectionCode::Duplicate));
        assert_eq!(code(&w.msg(reg("R4"))), Some(RejectionCode::Capacity));
        let dereg = |id: &str| {
            registry(RegistryCommand::Deregister {
                robot: RobotId::new(id),
            })
        };
        assert_eq!(code(&w.msg(dereg("R9"))), Some(RejectionCode::Unknown));
        let fx = w.msg(dereg("R2"));
        assert!(fx.contains(&Effect::Bus(BusOp::LeaveRobot(RobotId::new("R2")))));
        assert_eq!(code(&w.msg(dereg("R2"))), Some(RejectionCode::State));
    }

    #[test]
    fn busy_robot_refuses() {
        let mut fleet = RobotFleet::new(20_000, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = ChaCha8Rng::seed_from_u64(0);
        let a = |t: &str| {
            AclMessage::new(
                Performative::Request,
                names::RBM,
                "R1",
                format!("req-1/{t}"),
                Content::TaskAssignment(TaskAssignment {
                    request_id: RequestId::new("req-1"),
                    task: crate::domain::Task::new(t, ["C1"]),
                    robot: RobotId::new("R1"),
                }),
            )
        };
        let fx = fleet.on_assignment(&a("T1"), SimTime::from_secs(100), &mut rng, &mut f);
        assert_eq!(
            fx,
            vec![Effect::Timer {
                at: SimTime::from_secs(120),
                timer: Timer::RobotDone {
                    robot: RobotId::new("R1"),
                    epoch: 1
                }
            }]
        );
        let fx = fleet.on_assignment(&a("T2"), SimTime::from_secs(101), &mut rng, &mut f);
        assert!(matches!(&fx[0], Effect::Send(m) if m.performative == Performative::Refuse));
        let fx = fleet.on_done(&RobotId::new("R1"), 1);
        assert!(matches!(&fx[0], Effect::Send(m) if m.performative == Performative::Inform));
        assert!(fleet.on_done(&RobotId::new("R1"), 1).is_empty());
        let _ = OutcomeStatus::Success;
    }
}
