//! The simulation thread.
//!
//! One thread owns the [`Session`]. Network handlers reach it only through a
//! serialized job queue; each job is answered over a oneshot channel, and
//! every simulation event is published, in order, on a broadcast channel.
//! Pacing maps wall-clock time onto logical time and never changes what the
//! simulation does, only when it does it.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use mrs_core::bus::{AclMessage, BlueprintCommand, CommandEffect, Content, RegistryCommand, RejectionCode};
use mrs_core::domain::{CapabilitySet, PlanBlueprint, RequestKind, RobotId};
use mrs_core::rbm::robot_status;
use mrs_core::sim::{Command, ConfigError, ScenarioConfig, SimEventKind};
use mrs_core::time::SimTime;
use mrs_core::SimEvent;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, oneshot};

use crate::session::Session;

/// Longest the loop sleeps without re-reading the clock.
const MAX_NAP: Duration = Duration::from_millis(250);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub scenario: ScenarioConfig,
    /// Logical milliseconds per wall-clock millisecond.
    pub speed: f64,
    pub start_paused: bool,
    /// Frames buffered per subscriber before the oldest are dropped.
    pub stream_capacity: usize,
}

impl ServiceConfig {
    pub fn new(scenario: ScenarioConfig) -> Self {
        ServiceConfig {
            scenario,
            speed: 1.0,
            start_paused: false,
            stream_capacity: 1024,
        }
    }
}

/// An operator action.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    UpsertBlueprint(PlanBlueprint),
    RemoveBlueprint(RequestKind),
    SubmitRequest(RequestKind),
    RegisterRobot {
        robot: RobotId,
        capabilities: CapabilitySet,
    },
    DeregisterRobot(RobotId),
    Pause,
    Resume,
    SetSpeed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub client: Option<String>,
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Query {
    Status,
    Blueprints,
    Blueprint(RequestKind),
    Robots,
    Plans,
    SystemMetrics,
    RobotMetrics,
    /// Scenario plus command log: enough to replay the session.
    Commands,
    Trace,
}

/// A command's acknowledgment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ack {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conversation_id: Option<String>,
    pub applied_at: SimTime,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reply: Option<Content>,
    /// Accepted for later completion rather than done.
    #[serde(skip)]
    pub pending: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    BadRequest,
    NotFound,
    Conflict,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub kind: ErrorKind,
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conversation_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub applied_at: Option<SimTime>,
}

impl ApiError {
    pub fn new(kind: ErrorKind, error: &str, message: impl Into<String>) -> Self {
        ApiError {
            kind,
            error: error.to_owned(),
            message: message.into(),
            conversation_id: None,
            applied_at: None,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(ErrorKind::BadRequest, "invalid", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(ErrorKind::NotFound, "unknown", message)
    }

    fn stopped() -> Self {
        ApiError::new(ErrorKind::Internal, "stopped", "the simulation thread has stopped")
    }
}

/// Non-simulation happenings on the stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum ServiceEvent {
    CommandApplied {
        conversation_id: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        client: Option<String>,
        command: Command,
        #[serde(skip_serializing_if = "Option::is_none")]
        reply: Option<Content>,
    },
    Paused,
    Resumed,
    SpeedChanged {
        speed: f64,
    },
    RunFinished,
    Halted {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum FrameBody {
    Sim(SimEventKind<f64>),
    Service(ServiceEvent),
}

/// One event-stream frame. `seq` numbers frames in simulation order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Frame {
    pub seq: u64,
    pub t: SimTime,
    #[serde(flatten)]
    pub body: FrameBody,
}

impl Frame {
    /// The frame's `kind` tag.
    pub fn kind(&self) -> String {
        match serde_json::to_value(&self.body) {
            Ok(Value::Object(m)) => m.get("kind").and_then(Value::as_str).unwrap_or("unknown").to_owned(),
            _ => "unknown".to_owned(),
        }
    }
}

enum Job {
    Command(Envelope, oneshot::Sender<Result<Ack, ApiError>>),
    Query(Query, oneshot::Sender<Result<Value, ApiError>>),
}

/// Cloneable access to the simulation thread. The thread stops once every
/// handle is dropped.
#[derive(Clone)]
pub struct Handle {
    jobs: Sender<Job>,
    frames: broadcast::Sender<Frame>,
}

impl Handle {
    pub fn start(config: ServiceConfig) -> Result<(Handle, JoinHandle<()>), ConfigError> {
        let session = Session::new(config.scenario.clone())?;
        let (jobs, rx) = mpsc::channel();
        let (frames, _) = broadcast::channel(config.stream_capacity.max(1));
        let driver = Driver {
            session,
            scenario: config.scenario,
            pace: Pace::new(config.speed, config.start_paused),
            frames: frames.clone(),
            seq: 0,
            finished: false,
            halted: None,
        };
        let thread = std::thread::Builder::new()
            .name("mrs-sim".into())
            .spawn(move || driver.run(rx))
            .expect("spawn simulation thread");
        Ok((Handle { jobs, frames }, thread))
    }

    pub async fn command(&self, envelope: Envelope) -> Result<Ack, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.jobs
            .send(Job::Command(envelope, tx))
            .map_err(|_| ApiError::stopped())?;
        rx.await.map_err(|_| ApiError::stopped())?
    }

    pub async fn query(&self, query: Query) -> Result<Value, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.jobs.send(Job::Query(query, tx)).map_err(|_| ApiError::stopped())?;
        rx.await.map_err(|_| ApiError::stopped())?
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Frame> {
        self.frames.subscribe()
    }
}

/// Wall-clock to logical-time mapping.
#[derive(Debug, Clone, Copy)]
struct Pace {
    speed: f64,
    paused: bool,
    anchor_wall: Instant,
    anchor_logical: SimTime,
}

impl Pace {
    fn new(speed: f64, paused: bool) -> Self {
        Pace {
            speed,
            paused,
            anchor_wall: Instant::now(),
            anchor_logical: SimTime::ZERO,
        }
    }

    fn target(&self, at: Instant) -> SimTime {
        if self.paused {
            return self.anchor_logical;
        }
        let elapsed_ms = at.saturating_duration_since(self.anchor_wall).as_secs_f64() * 1e3;
        self.anchor_logical.after((elapsed_ms * self.speed) as u64)
    }

    /// Restarts the mapping from `logical` now.
    fn rebase(&mut self, logical: SimTime, at: Instant) {
        self.anchor_logical = logical;
        self.anchor_wall = at;
    }

    /// Wall time until `due` is reached.
    fn until(&self, due: SimTime, at: Instant) -> Duration {
        let ahead_ms = due.since(self.target(at).min(due)) as f64;
        Duration::from_secs_f64(ahead_ms / self.speed / 1e3)
    }
}

struct Driver {
    session: Session,
    scenario: ScenarioConfig,
    pace: Pace,
    frames: broadcast::Sender<Frame>,
    seq: u64,
    finished: bool,
    halted: Option<String>,
}

impl Driver {
    fn run(mut self, jobs: Receiver<Job>) {
        loop {
            self.catch_up();
            let job = match self.nap() {
                None => match jobs.recv() {
                    Ok(job) => job,
                    Err(_) => break,
                },
                Some(d) => match jobs.recv_timeout(d) {
                    Ok(job) => job,
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => break,
                },
            };
            self.catch_up();
            match job {
                Job::Command(envelope, reply) => {
                    let _ = reply.send(self.command(envelope));
                }
                Job::Query(query, reply) => {
                    let _ = reply.send(self.query(query));
                }
            }
        }
        log::debug!("simulation thread stopping at {}", self.session.sim().now());
    }

    fn now(&self) -> SimTime {
        self.session.sim().now()
    }

    fn end(&self) -> SimTime {
        self.session.sim().end_time()
    }

    fn publish(&mut self, t: SimTime, body: FrameBody) {
        self.seq += 1;
        // No subscribers is fine.
        let _ = self.frames.send(Frame { seq: self.seq, t, body });
    }

    fn publish_events(&mut self, events: Vec<SimEvent>) {
        for e in events {
            self.publish(e.t, FrameBody::Sim(e.event));
        }
    }

    fn halt(&mut self, message: String) {
        log::error!("simulation halted: {message}");
        let now = self.now();
        self.publish(
            now,
            FrameBody::Service(ServiceEvent::Halted {
                message: message.clone(),
            }),
        );
        self.halted = Some(message);
    }

    /// Runs the simulation up to the paced logical time.
    fn catch_up(&mut self) {
        if self.halted.is_some() || self.finished {
            return;
        }
        let target = self.pace.target(Instant::now()).min(self.end());
        if target > self.now() {
            match self.session.advance_to(target) {
                Ok(events) => self.publish_events(events),
                Err(e) => return self.halt(e.to_string()),
            }
        }
        if self.now() >= self.end() && self.session.sim().next_event_time().is_none() {
            self.finished = true;
            let end = self.end();
            self.publish(end, FrameBody::Service(ServiceEvent::RunFinished));
        }
    }

    /// How long to wait for a job; `None` blocks until one arrives.
    fn nap(&self) -> Option<Duration> {
        if self.pace.paused || self.finished || self.halted.is_some() {
            return None;
        }
        let due = self.session.sim().next_event_time().unwrap_or(self.end());
        Some(self.pace.until(due, Instant::now()).min(MAX_NAP))
    }

    fn command(&mut self, envelope: Envelope) -> Result<Ack, ApiError> {
        let Envelope { client, op } = envelope;
        let command = match op {
            Op::Pause | Op::Resume | Op::SetSpeed(_) => return Ok(self.control(op)),
            Op::UpsertBlueprint(blueprint) => Command::Blueprint(BlueprintCommand::Upsert { blueprint }),
            Op::RemoveBlueprint(request_kind) => Command::Blueprint(BlueprintCommand::Remove { request_kind }),
            Op::SubmitRequest(kind) => Command::SubmitRequest { kind },
            Op::RegisterRobot { robot, capabilities } => {
                Command::Registry(RegistryCommand::Register { robot, capabilities })
            }
            Op::DeregisterRobot(robot) => Command::Registry(RegistryCommand::Deregister { robot }),
        };
        if let Some(message) = &self.halted {
            return Err(ApiError::new(ErrorKind::Internal, "halted", message.clone()));
        }
        if self.now() >= self.end() {
            return Err(ApiError::new(ErrorKind::Conflict, "finished", "the run has ended"));
        }
        let is_request = matches!(command, Command::SubmitRequest { .. });
        let applied = match self.session.apply(command.clone(), client.clone()) {
            Ok(a) => a,
            Err(e) => {
                let message = e.to_string();
                self.halt(message.clone());
                return Err(ApiError::new(ErrorKind::Internal, "halted", message));
            }
        };
        let conversation_id = applied.submitted.conversation_id.clone();
        let at = applied.submitted.applied_at;
        let reply = applied.reply.as_ref().map(|m| m.content.clone());
        // The acknowledgment frame follows what the command caused.
        self.publish_events(applied.events);
        self.publish(
            at,
            FrameBody::Service(ServiceEvent::CommandApplied {
                conversation_id: conversation_id.clone(),
                client,
                command,
                reply: reply.clone(),
            }),
        );
        let outcome = if is_request {
            Ok(true)
        } else {
            classify(applied.reply.as_ref())
        };
        match outcome {
            Ok(pending) => Ok(Ack {
                conversation_id: Some(conversation_id),
                applied_at: at,
                reply,
                pending,
            }),
            Err(mut e) => {
                e.conversation_id = Some(conversation_id);
                e.applied_at = Some(at);
                Err(e)
            }
        }
    }

    fn control(&mut self, op: Op) -> Ack {
        let at = Instant::now();
        let logical = self.now();
        let event = match op {
            Op::Pause => {
                self.pace.rebase(logical, at);
                self.pace.paused = true;
                ServiceEvent::Paused
            }
            Op::Resume => {
                self.pace.rebase(logical, at);
                self.pace.paused = false;
                ServiceEvent::Resumed
            }
            Op::SetSpeed(speed) => {
                self.pace.rebase(logical, at);
                self.pace.speed = speed;
                ServiceEvent::SpeedChanged { speed }
            }
            _ => unreachable!("control ops only"),
        };
        self.publish(logical, FrameBody::Service(event));
        Ack {
            conversation_id: None,
            applied_at: logical,
            reply: None,
            pending: false,
        }
    }

    fn query(&self, query: Query) -> Result<Value, ApiError> {
        let sim = self.session.sim();
        let kb = sim.kb();
        let v = match query {
            Query::Status => json!({
                "now": sim.now(),
                "end": sim.end_time(),
                "paused": self.pace.paused,
                "speed": self.pace.speed,
                "finished": self.finished,
                "halted": self.halted,
                "registered": kb.registered_count(),
                "max_robots": kb.max_robots(),
            }),
            Query::Blueprints => to_value(&kb.blueprints().collect::<Vec<_>>()),
            Query::Blueprint(kind) => match kb.find_blueprint(&kind) {
                Some(pb) => to_value(pb),
                None => return Err(ApiError::not_found(format!("no blueprint for request kind {kind}"))),
            },
            Query::Robots => to_value(
                &kb.robots()
                    .filter_map(|r| robot_status(kb, &r.id, sim.deregistration_pending(&r.id)))
                    .collect::<Vec<_>>(),
            ),
            Query::Plans => to_value(&sim.plans_in_flight().collect::<Vec<_>>()),
            Query::SystemMetrics => json!({
                "now": sim.now(),
                "current": sim.system_snapshot(),
                "series": sim.series(),
            }),
            Query::RobotMetrics => to_value(&sim.robot_reports()),
            Query::Commands => json!({
                "scenario": self.scenario,
                "commands": self.session.log(),
            }),
            Query::Trace => Value::String(sim.trace_text().to_owned()),
        };
        Ok(v)
    }
}

fn to_value<T: Serialize + ?Sized>(value: &T) -> Value {
    serde_json::to_value(value).expect("snapshot serializes")
}

/// Reads an operator command's reply: `Ok(pending)` or the error to report.
fn classify(reply: Option<&AclMessage>) -> Result<bool, ApiError> {
    match reply.map(|m| &m.content) {
        Some(Content::CommandResult(r)) => match r.effect {
            CommandEffect::Applied => Ok(false),
            CommandEffect::Deferred => Ok(true),
            CommandEffect::NoOp => Err(ApiError::not_found(r.detail.clone())),
        },
        Some(Content::Rejection(r)) => {
            let kind = match r.code {
                RejectionCode::Capacity | RejectionCode::Duplicate | RejectionCode::Busy | RejectionCode::State => {
                    ErrorKind::Conflict
                }
                RejectionCode::Unknown => ErrorKind::NotFound,
                RejectionCode::Invalid => ErrorKind::BadRequest,
            };
            let code = to_value(&r.code);
            Err(ApiError::new(
                kind,
                code.as_str().unwrap_or("rejected"),
                r.reason.clone(),
            ))
        }
        other => Err(ApiError::new(
            ErrorKind::Internal,
            "no_reply",
            format!("unexpected reply {other:?}"),
        )),
    }
}
