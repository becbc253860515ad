//! Requests manager: FCFS queue, blueprint lookup, planner handoff, deadline
//! policing and requestor feedback.

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use crate::bus::{
    names, AclMessage, BlueprintCommand, CommandEffect, CommandResult, Content, Performative, Rejection, RejectionCode,
};
use crate::controller::{self, route, set, ControllerError, Effect, Timer};
use crate::domain::{FailureReason, OutcomeStatus, Request, RequestId, RequestOutcome};
use crate::kb::{BlueprintChange, KnowledgeBase};
use crate::time::SimTime;
use crate::workflow::{ActionHandler, ConditionEnv, ProcessDefinition};

pub const PROCESS: &str = include_str!("../processes/rqm.process");

pub const ACTIONS: &[&str] = &[
    "rqm.classify",
    "rqm.enqueue_request",
    "rqm.reject_request",
    "rqm.apply_blueprint_command",
    "rqm.record_plan_accepted",
    "rqm.record_plan_failure",
    "rqm.record_success",
    "rqm.record_execution_failure",
    "rqm.record_timeout",
    "rqm.ignore_stale",
    "rqm.notify_requestor",
    "rqm.check_queue",
    "rqm.dequeue_and_lookup",
    "rqm.forward_blueprint",
    "rqm.arm_plan_deadline",
    "rqm.reject_no_blueprint",
];

const ROUTES: &[&str] = &[
    "is_request",
    "is_blueprint_command",
    "is_plan_feedback",
    "is_exec_feedback",
    "is_timeout",
    "is_poll",
    "is_stale",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryState {
    Queued,
    AwaitingPlan,
    AwaitingExecution,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestQueueEntry {
    pub request: Request,
    pub state: EntryState,
    /// Deadline of the current wait, if any.
    pub deadline: Option<SimTime>,
    pub outcome: Option<OutcomeStatus>,
    #[serde(skip)]
    epoch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RqmConfig {
    pub plan_timeout_ms: u64,
    pub exec_timeout_ms: u64,
    /// Requests that may be between planner handoff and outcome at once.
    pub max_in_flight: usize,
}

impl Default for RqmConfig {
    fn default() -> Self {
        RqmConfig {
            plan_timeout_ms: 30_000,
            exec_timeout_ms: 300_000,
            max_in_flight: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RqmInput {
    Message(AclMessage),
    Timer(Timer),
}

#[derive(Debug, Clone, Default)]
struct RqmState {
    queue: VecDeque<RequestId>,
    entries: BTreeMap<RequestId, RequestQueueEntry>,
    in_flight: usize,
    forwarded: Vec<RequestId>,
}

#[derive(Debug, Clone)]
pub struct RequestsManager {
    def: ProcessDefinition,
    config: RqmConfig,
    state: RqmState,
}

impl RequestsManager {
    pub fn new(config: RqmConfig) -> Result<Self, ControllerError> {
        Ok(RequestsManager {
            def: controller::load("rqm", PROCESS, ACTIONS)?,
            config,
            state: RqmState::default(),
        })
    }

    pub fn handle(
        &mut self,
        input: &RqmInput,
        now: SimTime,
        kb: &mut KnowledgeBase,
    ) -> Result<Vec<Effect>, ControllerError> {
        let mut run = RqmRun {
            state: &mut self.state,
            config: &self.config,
            kb,
            now,
            input,
            effects: Vec::new(),
            subject: None,
            outcome: None,
        };
        controller::execute("rqm", &self.def, &mut run)?;
        Ok(run.effects)
    }

    pub fn entry(&self, id: &RequestId) -> Option<&RequestQueueEntry> {
        self.state.entries.get(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &RequestQueueEntry> {
        self.state.entries.values()
    }

    pub fn queue_len(&self) -> usize {
        self.state.queue.len()
    }

    pub fn in_flight(&self) -> usize {
        self.state.in_flight
    }

    /// Requests in the order they were handed to the planner.
    pub fn forwarded(&self) -> &[RequestId] {
        &self.state.forwarded
    }
}

struct RqmRun<'a> {
    state: &'a mut RqmState,
    config: &'a RqmConfig,
    kb: &'a mut KnowledgeBase,
    now: SimTime,
    input: &'a RqmInput,
    effects: Vec<Effect>,
    subject: Option<RequestId>,
    outcome: Option<OutcomeStatus>,
}

impl<'a> RqmRun<'a> {
    fn send(&mut self, performative: Performative, receiver: &str, conversation: &str, content: Content) {
        self.effects.push(Effect::Send(AclMessage::new(
            performative,
            names::RQM,
            receiver,
            conversation,
            content,
        )));
    }

    fn message(&self) -> Result<&'a AclMessage, String> {
        match self.input {
            RqmInput::Message(m) => Ok(m),
            RqmInput::Timer(_) => Err("action needs a message".into()),
        }
    }

    fn subject(&self) -> Result<RequestId, String> {
        self.subject.clone().ok_or_else(|| "no subject request".into())
    }

    fn entry(&mut self) -> Result<&mut RequestQueueEntry, String> {
        let id = self.subject()?;
        self.state
            .entries
            .get_mut(&id)
            .ok_or_else(|| format!("unknown request {id}"))
    }

    fn classify(&mut self, env: &mut ConditionEnv) {
        let awaiting = |st: &RqmState, id: &RequestId, states: &[EntryState]| {
            st.entries.get(id).is_some_and(|e| states.contains(&e.state))
        };
        let on = match self.input {
            RqmInput::Message(msg) => match &msg.content {
                Content::Request(rq) if msg.performative == Performative::Request => {
                    let fresh = !self.state.entries.contains_key(&rq.id);
                    route(env, &["fresh_request", "duplicate_request"], None);
                    set(env, "fresh_request", fresh);
                    set(env, "duplicate_request", !fresh);
                    self.subject = Some(rq.id.clone());
                    "is_request"
                }
                Content::BlueprintCommand(_) => "is_blueprint_command",
                Content::PlanAccepted(_) | Content::PlanFailure(_) => {
                    let id = RequestId::new(msg.conversation_id.as_str());
                    if awaiting(self.state, &id, &[EntryState::AwaitingPlan]) {
                        let accepted = matches!(msg.content, Content::PlanAccepted(_));
                        set(env, "plan_accepted", accepted);
                        set(env, "plan_rejected", !accepted);
                        self.subject = Some(id);
                        "is_plan_feedback"
                    } else {
                        "is_stale"
                    }
                }
                Content::Execution(report) => {
                    let states = [EntryState::AwaitingPlan, EntryState::AwaitingExecution];
                    if awaiting(self.state, &report.request_id, &states) {
                        set(env, "execution_succeeded", report.failure.is_none());
                        set(env, "execution_failed", report.failure.is_some());
                        self.subject = Some(report.request_id.clone());
                        "is_exec_feedback"
                    } else {
                        "is_stale"
                    }
                }
                _ => "is_stale",
            },
            RqmInput::Timer(timer) => match timer {
                Timer::Poll => "is_poll",
                Timer::PlanDeadline { request, epoch } | Timer::ExecDeadline { request, epoch } => {
                    let phase = if matches!(timer, Timer::PlanDeadline { .. }) {
                        EntryState::AwaitingPlan
                    } else {
                        EntryState::AwaitingExecution
                    };
                    let live = self
                        .state
                        .entries
                        .get(request)
                        .is_some_and(|e| e.state == phase && e.epoch == *epoch);
                    if live {
                        self.subject = Some(request.clone());
                        self.outcome = Some(OutcomeStatus::Failed(match phase {
                            EntryState::AwaitingPlan => FailureReason::PlanTimeout,
                            _ => FailureReason::TaskTimeout,
                        }));
                        "is_timeout"
                    } else {
                        "is_stale"
                    }
                }
                _ => "is_stale",
            },
        };
        route(env, ROUTES, Some(on));
    }

    fn enqueue(&mut self) -> Result<(), String> {
        let msg = self.message()?;
        let Content::Request(rq) = &msg.content else {
            return Err("not a request".into());
        };
        self.state.entries.insert(
            rq.id.clone(),
            RequestQueueEntry {
                request: rq.clone(),
                state: EntryState::Queued,
                deadline: None,
                outcome: None,
                epoch: 0,
            },
        );
        self.state.queue.push_back(rq.id.clone());
        let sender = msg.sender.name().to_owned();
        self.send(
            Performative::Agree,
            &sender,
            &msg.conversation_id,
            Content::RequestAck(rq.clone()),
        );
        Ok(())
    }

    fn reject_request(&mut self) -> Result<(), String> {
        let msg = self.message()?;
        let id = self.subject()?;
        log::warn!("duplicate request {id} rejected");
        let sender = msg.sender.name().to_owned();
        self.send(
            Performative::Refuse,
            &sender,
            &msg.conversation_id,
            Content::Rejection(Rejection {
                subject: id.to_string(),
                code: RejectionCode::Duplicate,
                reason: format!("request {id} was already received"),
            }),
        );
        Ok(())
    }

    fn apply_blueprint_command(&mut self) -> Result<(), String> {
        let msg = self.message()?;
        let Content::BlueprintCommand(cmd) = &msg.content else {
            return Err("not a blueprint command".into());
        };
        let sender = msg.sender.name().to_owned();
        let conv = msg.conversation_id.as_str();
        let reply = match cmd {
            BlueprintCommand::Upsert { blueprint } => {
                let kind = blueprint.request_kind.clone();
                match self.kb.upsert_blueprint(blueprint.clone()) {
                    Ok(change) => Ok(CommandResult {
                        effect: CommandEffect::Applied,
                        detail: format!(
                            "blueprint {} {} for {kind}",
                            blueprint.id,
                            match change {
                                BlueprintChange::Inserted => "stored",
                                BlueprintChange::Replaced => "replaced",
                            }
                        ),
                    }),
                    Err(e) => Err(Rejection {
                        subject: kind.to_string(),
                        code: RejectionCode::Invalid,
                        reason: e.to_string(),
                    }),
                }
            }
            BlueprintCommand::Remove { request_kind } => Ok(match self.kb.remove_blueprint(request_kind) {
                Some(pb) => CommandResult {
                    effect: CommandEffect::Applied,
                    detail: format!("blueprint {} for {request_kind} removed", pb.id),
                },
                None => CommandResult {
                    effect: CommandEffect::NoOp,
                    detail: format!("no blueprint for {request_kind}"),
                },
            }),
        };
        match reply {
            Ok(r) => self.send(Performative::Agree, &sender, conv, Content::CommandResult(r)),
            Err(r) => self.send(Performative::Refuse, &sender, conv, Content::Rejection(r)),
        }
        Ok(())
    }

    fn record_plan_accepted(&mut self) -> Result<(), String> {
        let (now, timeout) = (self.now, self.config.exec_timeout_ms);
        let entry = self.entry()?;
        entry.state = EntryState::AwaitingExecution;
        entry.epoch += 1;
        let at = now.after(timeout);
        entry.deadline = Some(at);
        let timer = Timer::ExecDeadline {
            request: entry.request.id.clone(),
            epoch: entry.epoch,
        };
        self.effects.push(Effect::Timer { at, timer });
        Ok(())
    }

    fn record_plan_failure(&mut self) -> Result<(), String> {
        let Content::PlanFailure(report) = &self.message()?.content else {
            return Err("not a plan failure".into());
        };
        self.outcome = Some(OutcomeStatus::Failed(report.failure.reason()));
        Ok(())
    }

    fn record_execution(&mut self) -> Result<(), String> {
        let Content::Execution(report) = &self.message()?.content else {
            return Err("not an execution report".into());
        };
        self.outcome = Some(match report.failure {
            None => OutcomeStatus::Success,
            Some(r) => OutcomeStatus::Failed(r),
        });
        Ok(())
    }

    fn notify_requestor(&mut self) -> Result<(), String> {
        let status = self.outcome.ok_or("no outcome recorded")?;
        let now = self.now;
        let entry = self.entry()?;
        let was_in_flight = matches!(entry.state, EntryState::AwaitingPlan | EntryState::AwaitingExecution);
        entry.state = EntryState::Done;
        entry.deadline = None;
        entry.outcome = Some(status);
        let id = entry.request.id.clone();
        if was_in_flight {
            self.state.in_flight -= 1;
        }
        self.send_outcome(id, status, now);
        Ok(())
    }

    fn send_outcome(&mut self, id: RequestId, status: OutcomeStatus, now: SimTime) {
        let performative = if status.is_success() {
            Performative::Inform
        } else {
            Performative::Failure
        };
        let conv = id.to_string();
        self.send(
            performative,
            names::REQUESTOR,
            &conv,
            Content::Outcome(RequestOutcome {
                request_id: id,
                status,
                completion_time: now,
            }),
        );
    }

    fn check_queue(&mut self, env: &mut ConditionEnv) {
        let can = !self.state.queue.is_empty() && self.state.in_flight < self.config.max_in_flight;
        set(env, "can_dispatch", can);
        set(env, "queue_idle", !can);
    }

    fn dequeue_and_lookup(&mut self, env: &mut ConditionEnv) -> Result<(), String> {
        let id = self.state.queue.pop_front().ok_or("queue is empty")?;
        let kind = &self.state.entries[&id].request.kind;
        let found = self.kb.find_blueprint(kind).is_some();
        set(env, "blueprint_found", found);
        set(env, "no_blueprint", !found);
        self.subject = Some(id);
        Ok(())
    }

    fn forward_blueprint(&mut self) -> Result<(), String> {
        let id = self.subject()?;
        let kind = self.state.entries[&id].request.kind.clone();
        let pb = self.kb.find_blueprint(&kind).ok_or("blueprint vanished")?.clone();
        let entry = self.entry()?;
        entry.state = EntryState::AwaitingPlan;
        entry.epoch += 1;
        self.state.in_flight += 1;
        self.state.forwarded.push(id.clone());
        self.send(Performative::Request, names::PLN, id.as_str(), Content::Blueprint(pb));
        Ok(())
    }

    fn arm_plan_deadline(&mut self) -> Result<(), String> {
        let at = self.now.after(self.config.plan_timeout_ms);
        let entry = self.entry()?;
        entry.deadline = Some(at);
        let timer = Timer::PlanDeadline {
            request: entry.request.id.clone(),
            epoch: entry.epoch,
        };
        self.effects.push(Effect::Timer { at, timer });
        Ok(())
    }

    fn reject_no_blueprint(&mut self) -> Result<(), String> {
        let now = self.now;
        let status = OutcomeStatus::Failed(FailureReason::NoBlueprint);
        let entry = self.entry()?;
        entry.state = EntryState::Done;
        entry.outcome = Some(status);
        let id = entry.request.id.clone();
        log::debug!("request {id} of kind {} has no blueprint", entry.request.kind);
        self.send_outcome(id, status, now);
        if !self.state.queue.is_empty() {
            self.effects.push(Effect::Timer {
                at: now,
                timer: Timer::Poll,
            });
        }
        Ok(())
    }
}

impl ActionHandler for RqmRun<'_> {
    fn perform(&mut self, action: &str, env: &mut ConditionEnv) -> Result<(), String> {
        match action {
            "rqm.classify" => self.classify(env),
            "rqm.enqueue_request" => self.enqueue()?,
            "rqm.reject_request" => self.reject_request()?,
            "rqm.apply_blueprint_command" => self.apply_blueprint_command()?,
            "rqm.record_plan_accepted" => self.record_plan_accepted()?,
            "rqm.record_plan_failure" => self.record_plan_failure()?,
            "rqm.record_success" | "rqm.record_execution_failure" => self.record_execution()?,
            // The outcome was fixed when the deadline was classified.
            "rqm.record_timeout" => {}
            "rqm.ignore_stale" => log::debug!("requests manager ignored stale input {:?}", self.input),
            "rqm.notify_requestor" => self.notify_requestor()?,
            "rqm.check_queue" => self.check_queue(env),
            "rqm.dequeue_and_lookup" => self.dequeue_and_lookup(env)?,
            "rqm.forward_blueprint" => self.forward_blueprint()?,
            "rqm.arm_plan_deadline" => self.arm_plan_deadline()?,
            "rqm.reject_no_blueprint" => self.reject_no_blueprint()?,
            other => return Err(format!("no handler for {other}")),
        }
        Ok(())
    }
}
