//! The discrete-event loop hosting the controllers, the simulated robots and
//! the observer agents.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bus::{
    names, AclMessage, BlueprintCommand, Bus, BusError, Content, Performative, PlanFailureReport, RegistryCommand,
    Rejection, RobotStatus, TaskAssignment,
};
use crate::controller::{BusOp, ControllerError, Effect, Timer};
use crate::domain::{Request, RequestId, RequestKind, RequestOutcome, RobotId, TaskId, VerifiedPlan};
use crate::kb::{KnowledgeBase, Lifecycle};
use crate::metrics::{derive_event, MetricsCollector, MetricsError, RobotReport, SystemSeriesRow};
use crate::pln::{Planner, PlanningDecision};
use crate::rbm::{PlanExecution, RbmInput, RobotFleet, RobotsManager};
use crate::rqm::{RequestQueueEntry, RequestsManager, RqmInput};
use crate::scalar::Scalar;
use crate::time::{SimTime, MS_PER_SECOND};
use crate::trace::{TraceHeader, TraceWriter, TRACE_VERSION};

use super::config::{ConfigError, ScenarioConfig};
use super::queue::{EventClass, EventQueue};

/// Per-purpose random streams drawn from the run seed.
mod stream {
    pub const ARRIVALS: u64 = 1;
    pub const CHURN: u64 = 2;
    pub const JITTER: u64 = 3;
    pub const FAULTS: u64 = 4;
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone)]
enum Event {
    Deliver(AclMessage),
    Timer(Timer),
    GenerateRequest,
    Churn,
    Sample,
}

fn is_observer(agent: &str) -> bool {
    matches!(agent, names::REQUESTOR | names::OPERATOR | names::MONITOR)
}

fn timer_class(timer: &Timer) -> EventClass {
    match timer {
        Timer::Poll => EventClass::Message,
        Timer::RobotDone { .. } => EventClass::Work,
        Timer::PlanDeadline { .. } | Timer::ExecDeadline { .. } | Timer::TaskDeadline { .. } => EventClass::Deadline,
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invariant violated at {at}: {message}")]
    Invariant { at: SimTime, message: String },
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("bus rejected a message: {0}")]
    Protocol(BusError),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Something the run did, as pushed to live observers.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum SimEventKind<S: Scalar> {
    RequestArrived(Request),
    RequestRejected {
        conversation_id: String,
        rejection: Rejection,
    },
    RequestOutcome(RequestOutcome),
    PlanCreated(VerifiedPlan),
    PlanFailed(PlanFailureReport),
    TaskAssigned(TaskAssignment),
    TaskCompleted {
        request_id: RequestId,
        task_id: TaskId,
        robot: RobotId,
        success: bool,
    },
    RobotStateChanged(RobotStatus),
    MetricRow(SystemSeriesRow<S>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimEvent<S: Scalar> {
    pub t: SimTime,
    #[serde(flatten)]
    pub event: SimEventKind<S>,
}

/// An outside action, entering the run as a message from an observer agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "snake_case")]
pub enum Command {
    SubmitRequest { kind: RequestKind },
    Registry(RegistryCommand),
    Blueprint(BlueprintCommand),
}

/// Where a submitted command's reply will be filed, and when it applies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Submitted {
    pub conversation_id: String,
    pub applied_at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput<S: Scalar> {
    pub series: Vec<SystemSeriesRow<S>>,
    pub robots: Vec<RobotReport<S>>,
    pub trace: String,
    pub outcomes: Vec<RequestOutcome>,
    pub decisions: Vec<(RequestId, Vec<PlanningDecision>)>,
}

impl<S: Scalar> SimulationOutput<S> {
    pub fn system_series_csv(&self) -> String {
        crate::metrics::system_series_csv(&self.series)
    }

    pub fn robot_report_csv(&self) -> String {
        crate::metrics::robot_report_csv(&self.robots)
    }

    /// One JSON object per finished request, in completion order.
    pub fn outcomes_log(&self) -> String {
        self.outcomes
            .iter()
            .map(|o| serde_json::to_string(o).expect("outcome serializes") + "\n")
            .collect()
    }
}

/// Runs a scenario to completion.
pub fn run<S: Scalar>(config: &ScenarioConfig) -> Result<SimulationOutput<S>, RunError> {
    let mut sim = Simulation::new(config.clone())?;
    sim.run_to_end()?;
    Ok(sim.finish())
}

pub struct Simulation<S: Scalar = f64> {
    config: ScenarioConfig,
    queue: EventQueue<Event>,
    bus: Bus,
    kb: KnowledgeBase,
    rqm: RequestsManager,
    pln: Planner,
    rbm: RobotsManager,
    fleet: RobotFleet,
    collector: MetricsCollector<S>,
    trace: TraceWriter,
    series: Vec<SystemSeriesRow<S>>,
    outcomes: Vec<RequestOutcome>,
    arrivals: ChaCha8Rng,
    churn: ChaCha8Rng,
    jitter: ChaCha8Rng,
    faults: ChaCha8Rng,
    kinds: Vec<RequestKind>,
    kind_weights: Option<WeightedIndex<f64>>,
    next_request: u64,
    next_command: u64,
    replies: BTreeMap<String, AclMessage>,
    capture: bool,
    events: Vec<SimEvent<S>>,
    check_invariants: bool,
}

impl<S: Scalar> Simulation<S> {
    pub fn new(config: ScenarioConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let invalid = |e: String| ConfigError::Invalid(vec![e]);
        let seed = config.seed;
        let kinds: Vec<RequestKind> = config.request_kind_weights.keys().cloned().collect();
        let kind_weights = if config.request_period_s > 0 {
            Some(
                WeightedIndex::new(config.request_kind_weights.values().copied())
                    .map_err(|e| invalid(format!("request_kind_weights: {e}")))?,
            )
        } else {
            None
        };
        let header = TraceHeader {
            version: TRACE_VERSION,
            seed,
            duration_ms: config.duration_ms(),
            sample_interval_ms: config.sample_interval_s * MS_PER_SECOND,
            roster: config.roster(),
        };
        let mut sim = Simulation {
            queue: EventQueue::new(),
            bus: Bus::new(),
            kb: KnowledgeBase::new(config.max_robots),
            rqm: RequestsManager::new(config.rqm_config()).map_err(|e| invalid(e.to_string()))?,
            pln: Planner::new().map_err(|e| invalid(e.to_string()))?,
            rbm: RobotsManager::new(config.rbm_config()).map_err(|e| invalid(e.to_string()))?,
            fleet: RobotFleet::new(config.task_duration.base_ms, config.task_duration.jitter_ms),
            collector: MetricsCollector::new(),
            trace: TraceWriter::new(header),
            series: Vec::new(),
            outcomes: Vec::new(),
            arrivals: rng(seed, stream::ARRIVALS),
            churn: rng(seed, stream::CHURN),
            jitter: rng(seed, stream::JITTER),
            faults: rng(seed, stream::FAULTS),
            kinds,
            kind_weights,
            next_request: 0,
            next_command: 0,
            replies: BTreeMap::new(),
            capture: false,
            events: Vec::new(),
            check_invariants: true,
            config,
        };
        for agent in [
            names::RQM,
            names::PLN,
            names::RBM,
            names::REQUESTOR,
            names::OPERATOR,
            names::MONITOR,
        ] {
            sim.bus.register_agent(agent).map_err(|e| invalid(e.to_string()))?;
        }
        for pb in sim.config.blueprints.clone() {
            sim.kb.upsert_blueprint(pb).map_err(|e| invalid(e.to_string()))?;
        }
        for r in sim.config.robots.clone() {
            sim.kb
                .add_known_robot(r.id.clone(), r.capabilities.clone(), r.history, SimTime::ZERO);
            sim.collector
                .add_robot(r.id.clone(), r.registered, r.history, SimTime::ZERO);
            if r.registered {
                sim.kb
                    .register_robot(&r.id, r.capabilities.clone(), SimTime::ZERO)
                    .map_err(|e| invalid(e.to_string()))?;
                sim.join_robot(&r.id).map_err(|e| invalid(e.to_string()))?;
            }
        }
        for (robot, faults) in &sim.config.fault_injection {
            sim.fleet.set_faults(robot.clone(), *faults);
        }
        let c = &sim.config;
        let (requests, churn, sample) = (c.request_period_s, c.churn_period_s, c.sample_interval_s);
        sim.schedule_periodic(churn, EventClass::Control, Event::Churn);
        sim.schedule_periodic(requests, EventClass::Control, Event::GenerateRequest);
        sim.schedule_periodic(sample, EventClass::Sample, Event::Sample);
        Ok(sim)
    }

    fn schedule_periodic(&mut self, period_s: u64, class: EventClass, event: Event) {
        if period_s == 0 {
            return;
        }
        let at = self.queue.now().after(period_s * MS_PER_SECOND);
        if at.as_millis() <= self.config.duration_ms() {
            self.queue.push(at, class, event);
        }
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    pub fn end_time(&self) -> SimTime {
        SimTime::from_millis(self.config.duration_ms())
    }

    pub fn is_finished(&self) -> bool {
        self.now() >= self.end_time() && self.next_event_time().is_none()
    }

    /// Time of the next event inside the run window.
    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue.peek_time().filter(|t| *t <= self.end_time())
    }

    /// Turns on per-event invariant checks (on by default).
    pub fn set_invariant_checks(&mut self, on: bool) {
        self.check_invariants = on;
    }

    /// Starts recording [`SimEvent`]s for [`Simulation::drain_events`].
    pub fn capture_events(&mut self, on: bool) {
        self.capture = on;
    }

    pub fn drain_events(&mut self) -> Vec<SimEvent<S>> {
        std::mem::take(&mut self.events)
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn plans_in_flight(&self) -> impl Iterator<Item = &PlanExecution> {
        self.rbm.plans()
    }

    pub fn request_entries(&self) -> impl Iterator<Item = &RequestQueueEntry> {
        self.rqm.entries()
    }

    pub fn deregistration_pending(&self, robot: &RobotId) -> bool {
        self.rbm.deregistration_pending(robot)
    }

    pub fn series(&self) -> &[SystemSeriesRow<S>] {
        &self.series
    }

    pub fn system_snapshot(&self) -> SystemSeriesRow<S> {
        self.collector.system_snapshot(self.now())
    }

    pub fn robot_reports(&self) -> Vec<RobotReport<S>> {
        self.collector.robot_reports(self.now())
    }

    pub fn collector(&self) -> &MetricsCollector<S> {
        &self.collector
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn trace_text(&self) -> &str {
        self.trace.text()
    }

    pub fn decisions(&self) -> &[(RequestId, Vec<PlanningDecision>)] {
        self.pln.decisions()
    }

    /// The reply filed under a conversation started by [`Simulation::submit`].
    pub fn reply(&self, conversation_id: &str) -> Option<&AclMessage> {
        self.replies.get(conversation_id)
    }

    /// Queues a command as a message delivered at the current time.
    pub fn submit(&mut self, command: Command) -> Submitted {
        let now = self.now();
        let msg = match command {
            Command::SubmitRequest { kind } => self.request_message(kind),
            Command::Registry(cmd) => self.operator_message(Content::Registry(cmd)),
            Command::Blueprint(cmd) => self.operator_message(Content::BlueprintCommand(cmd)),
        };
        let conversation_id = msg.conversation_id.clone();
        self.queue.push(now, EventClass::Message, Event::Deliver(msg));
        Submitted {
            conversation_id,
            applied_at: now,
        }
    }

    fn request_message(&mut self, kind: RequestKind) -> AclMessage {
        self.next_request += 1;
        let id = RequestId::new(format!("req-{}", self.next_request));
        let rq = Request {
            id: id.clone(),
            kind,
            arrival: self.now(),
        };
        AclMessage::new(
            Performative::Request,
            names::REQUESTOR,
            names::RQM,
            id.as_str(),
            Content::Request(rq),
        )
    }

    fn operator_message(&mut self, content: Content) -> AclMessage {
        self.next_command += 1;
        let receiver = match content {
            Content::BlueprintCommand(_) => names::RQM,
            _ => names::RBM,
        };
        let conv = format!("op-{}", self.next_command);
        AclMessage::new(Performative::Request, names::OPERATOR, receiver, conv, content)
    }

    /// Processes every event due at or before the current time.
    pub fn settle(&mut self) -> Result<(), SimError> {
        let now = self.now();
        self.run_until(now)
    }

    /// Processes events due up to `t` (capped at the run's end) and moves
    /// the clock there.
    pub fn run_until(&mut self, t: SimTime) -> Result<(), SimError> {
        let t = t.min(self.end_time());
        while self.next_event_time().is_some_and(|next| next <= t) {
            self.step()?;
        }
        self.queue.advance_to(t);
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        self.run_until(self.end_time())
    }

    /// Processes the next event; `false` once nothing is due inside the run.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.next_event_time().is_none() {
            return Ok(false);
        }
        let (_, event) = self.queue.pop().expect("peeked");
        let sampled = matches!(event, Event::Sample);
        match event {
            Event::Deliver(msg) => self.deliver(msg)?,
            Event::Timer(timer) => self.fire(timer)?,
            Event::GenerateRequest => self.generate_request(),
            Event::Churn => self.churn_tick(),
            Event::Sample => self.sample(),
        }
        if self.check_invariants {
            self.check(sampled)?;
        }
        Ok(true)
    }

    /// Closes the trace at the current time and hands back the results.
    pub fn finish(mut self) -> SimulationOutput<S> {
        let end = self.now();
        self.trace.end(end);
        SimulationOutput {
            robots: self.collector.robot_reports(end),
            series: self.series,
            trace: self.trace.into_text(),
            outcomes: self.outcomes,
            decisions: self.pln.decisions().to_vec(),
        }
    }

    fn generate_request(&mut self) {
        if let Some(w) = &self.kind_weights {
            let kind = self.kinds[w.sample(&mut self.arrivals)].clone();
            let msg = self.request_message(kind);
            self.queue.push(self.now(), EventClass::Message, Event::Deliver(msg));
        }
        self.schedule_periodic(
            self.config.request_period_s,
            EventClass::Control,
            Event::GenerateRequest,
        );
    }

    /// One registered robot leaves and one unregistered robot joins, drawn
    /// from disjoint pools so no robot swaps with itself.
    fn churn_tick(&mut self) {
        let leaving: Vec<RobotId> = self
            .kb
            .registered()
            .map(|r| r.id.clone())
            .filter(|id| !self.rbm.deregistration_pending(id))
            .collect();
        let joining: Vec<(RobotId, _)> = self
            .kb
            .robots()
            .filter(|r| r.lifecycle == Lifecycle::Unregistered)
            .map(|r| (r.id.clone(), r.capabilities.clone()))
            .collect();
        if !leaving.is_empty() {
            let robot = leaving[self.churn.random_range(0..leaving.len())].clone();
            let msg = self.operator_message(Content::Registry(RegistryCommand::Deregister { robot }));
            self.queue.push(self.now(), EventClass::Message, Event::Deliver(msg));
        }
        if !joining.is_empty() {
            let (robot, capabilities) = joining[self.churn.random_range(0..joining.len())].clone();
            let cmd = RegistryCommand::Register { robot, capabilities };
            let msg = self.operator_message(Content::Registry(cmd));
            self.queue.push(self.now(), EventClass::Message, Event::Deliver(msg));
        }
        self.schedule_periodic(self.config.churn_period_s, EventClass::Control, Event::Churn);
    }

    fn sample(&mut self) {
        let row = self.collector.system_snapshot(self.now());
        self.emit(SimEventKind::MetricRow(row.clone()));
        self.series.push(row);
        self.schedule_periodic(self.config.sample_interval_s, EventClass::Sample, Event::Sample);
    }

    fn emit(&mut self, event: SimEventKind<S>) {
        if self.capture {
            self.events.push(SimEvent { t: self.now(), event });
        }
    }

    fn fire(&mut self, timer: Timer) -> Result<(), SimError> {
        let now = self.now();
        let effects = match &timer {
            Timer::RobotDone { robot, epoch } => self.fleet.on_done(robot, *epoch),
            Timer::TaskDeadline { .. } => {
                self.rbm
                    .handle(&RbmInput::Timer(timer), now, &mut self.kb, &mut self.fleet)?
            }
            _ => self.rqm.handle(&RqmInput::Timer(timer), now, &mut self.kb)?,
        };
        self.apply(effects)
    }

    fn apply(&mut self, effects: Vec<Effect>) -> Result<(), SimError> {
        for effect in effects {
            match effect {
                Effect::Send(msg) => {
                    if is_observer(msg.receiver.name()) {
                        // Observers see state changes the moment they happen.
                        self.deliver(msg)?;
                    } else {
                        let at = self.now().after(self.latency(&msg));
                        self.queue.push(at, EventClass::Message, Event::Deliver(msg));
                    }
                }
                Effect::Timer { at, timer } => {
                    let class = timer_class(&timer);
                    self.queue.push(at, class, Event::Timer(timer));
                }
                Effect::Bus(BusOp::JoinRobot(robot)) => self.join_robot(&robot).map_err(SimError::Protocol)?,
                Effect::Bus(BusOp::LeaveRobot(robot)) => self
                    .bus
                    .deregister_agent(&(&robot).into())
                    .map_err(SimError::Protocol)?,
            }
        }
        Ok(())
    }

    fn latency(&self, msg: &AclMessage) -> u64 {
        if is_observer(msg.sender.name()) || is_observer(msg.receiver.name()) {
            0
        } else {
            self.config.message_latency_ms
        }
    }

    fn join_robot(&mut self, robot: &RobotId) -> Result<(), BusError> {
        let agent = self.bus.register_agent(robot.as_str())?;
        let capabilities = self.kb.robot(robot).map(|r| r.capabilities.clone()).unwrap_or_default();
        for c in capabilities {
            self.bus.publish_service(&agent, &format!("capability:{c}"))?;
        }
        Ok(())
    }

    fn deliver(&mut self, msg: AclMessage) -> Result<(), SimError> {
        let now = self.now();
        match self.bus.send(msg.clone()) {
            Ok(_) => {}
            Err(BusError::Undeliverable { receiver }) => {
                log::info!("{} from {} to {receiver} undeliverable", msg.content.kind(), msg.sender);
                if msg.sender.name() == names::RBM {
                    let input = RbmInput::Undeliverable(msg);
                    let effects = self.rbm.handle(&input, now, &mut self.kb, &mut self.fleet)?;
                    self.apply(effects)?;
                }
                return Ok(());
            }
            Err(e) => return Err(SimError::Protocol(e)),
        }
        let msg = self.bus.receive(&msg.receiver).expect("message just delivered");
        self.trace.message(now, &msg);
        if let Some(event) = derive_event(&msg) {
            self.collector.on_event(now, event)?;
        }
        self.observe(&msg);
        let effects = match msg.receiver.name() {
            names::RQM => self.rqm.handle(&RqmInput::Message(msg), now, &mut self.kb)?,
            names::PLN => self.pln.handle(&msg, &self.kb)?,
            names::RBM => self
                .rbm
                .handle(&RbmInput::Message(msg), now, &mut self.kb, &mut self.fleet)?,
            names::REQUESTOR | names::OPERATOR | names::MONITOR => Vec::new(),
            _ => self.fleet.on_assignment(&msg, now, &mut self.jitter, &mut self.faults),
        };
        self.apply(effects)
    }

    /// Files replies and outcomes, and records live events.
    fn observe(&mut self, msg: &AclMessage) {
        let receiver = msg.receiver.name();
        if receiver == names::REQUESTOR || receiver == names::OPERATOR {
            if let Content::Outcome(o) = &msg.content {
                self.outcomes.push(o.clone());
            } else {
                self.replies.insert(msg.conversation_id.clone(), msg.clone());
            }
        }
        if !self.capture {
            return;
        }
        let event = match (&msg.content, receiver) {
            (Content::RequestAck(rq), names::REQUESTOR) => SimEventKind::RequestArrived(rq.clone()),
            (Content::Rejection(r), names::REQUESTOR) => SimEventKind::RequestRejected {
                conversation_id: msg.conversation_id.clone(),
                rejection: r.clone(),
            },
            (Content::Outcome(o), names::REQUESTOR) => SimEventKind::RequestOutcome(o.clone()),
            (Content::VerifiedPlan(pv), names::RBM) => SimEventKind::PlanCreated(pv.clone()),
            (Content::PlanFailure(f), names::RQM) => SimEventKind::PlanFailed(f.clone()),
            (Content::TaskAssignment(a), _) => SimEventKind::TaskAssigned(a.clone()),
            (Content::TaskFeedback(f), names::RBM) => SimEventKind::TaskCompleted {
                request_id: f.request_id.clone(),
                task_id: f.task_id.clone(),
                robot: f.robot.clone(),
                success: msg.performative == Performative::Inform,
            },
            (Content::RobotStatus(s), names::MONITOR) => SimEventKind::RobotStateChanged(s.clone()),
            _ => return,
        };
        self.emit(event);
    }

    fn check(&self, sampled: bool) -> Result<(), SimError> {
        let now = self.now();
        let fail = |message: String| Err(SimError::Invariant { at: now, message });
        if self.kb.registered_count() > self.config.max_robots {
            return fail(format!(
                "{} robots registered, limit {}",
                self.kb.registered_count(),
                self.config.max_robots
            ));
        }
        for r in self.kb.robots() {
            if let Err(e) = r.clock.check(now) {
                return fail(format!("robot {} clock: {e}", r.id));
            }
            if (r.lifecycle == Lifecycle::Controlled) != r.current_task.is_some() {
                return fail(format!(
                    "robot {} is {} with task {:?}",
                    r.id, r.lifecycle, r.current_task
                ));
            }
            if let Some(clock) = self.collector.robot_clock(&r.id) {
                if let Err(e) = clock.check(now) {
                    return fail(format!("robot {} observed clock: {e}", r.id));
                }
            }
        }
        if !sampled {
            return Ok(());
        }
        // At a sampling instant every state change has reached the monitor.
        if let Some(row) = self.series.last() {
            if let Err(e) = row.check() {
                return fail(format!("series row: {e}"));
            }
        }
        for r in self.kb.robots() {
            let Some(clock) = self.collector.robot_clock(&r.id) else {
                return fail(format!("robot {} unseen by metrics", r.id));
            };
            if clock.state() != r.lifecycle || clock.totals_at(now) != r.clock.totals_at(now) {
                return fail(format!("robot {} metrics disagree with the registry", r.id));
            }
            if self.collector.robot_history(&r.id) != Some(r.tasks_completed) {
                return fail(format!("robot {} history disagrees with the registry", r.id));
            }
        }
        Ok(())
    }
}
