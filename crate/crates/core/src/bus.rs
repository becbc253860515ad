//! In-process agent runtime: unique agent identifiers, a service directory,
//! and FIFO mailboxes carrying typed ACL messages.
//!
//! The bus only delivers. Latency and ordering across agents are the
//! simulation loop's business; the bus guarantees per-receiver FIFO and that
//! a message is either appended to exactly one mailbox or reported as
//! undeliverable.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{
    BlueprintId, CapabilitySet, FailureReason, OutcomeStatus, PlanBlueprint, Request, RequestId, RequestKind,
    RequestOutcome, RobotId, Task, TaskId, VerifiedPlan,
};
use crate::kb::Lifecycle;
use crate::pln::PlanFailure;

/// Well-known agent names.
pub mod names {
    pub const RQM: &str = "RqM";
    pub const PLN: &str = "PLN";
    pub const RBM: &str = "RbM";
    /// Source of incoming requests and sink of request outcomes.
    pub const REQUESTOR: &str = "Requestor";
    /// Issues registry and blueprint commands (churn driver, operator console).
    pub const OPERATOR: &str = "Operator";
    /// Receives robot status notifications.
    pub const MONITOR: &str = "Monitor";
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(String);

impl AgentId {
    pub fn new(name: impl Into<String>) -> Self {
        AgentId(name.into())
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&RobotId> for AgentId {
    fn from(r: &RobotId) -> Self {
        AgentId(r.as_str().to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Performative {
    Request,
    Agree,
    Refuse,
    Inform,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionCode {
    Capacity,
    Duplicate,
    Unknown,
    Invalid,
    Busy,
    /// The subject is in the wrong lifecycle state for the command.
    State,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub subject: String,
    pub code: RejectionCode,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanAccepted {
    pub request_id: RequestId,
    pub blueprint_id: BlueprintId,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanFailureReport {
    pub request_id: RequestId,
    #[serde(flatten)]
    pub failure: PlanFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub request_id: RequestId,
    pub task: Task,
    pub robot: RobotId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFeedback {
    pub request_id: RequestId,
    pub task_id: TaskId,
    pub robot: RobotId,
}

/// Plan-level execution feedback from the robots manager.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub request_id: RequestId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RegistryCommand {
    Register {
        robot: RobotId,
        capabilities: CapabilitySet,
    },
    Deregister {
        robot: RobotId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BlueprintCommand {
    Upsert { blueprint: PlanBlueprint },
    Remove { request_kind: RequestKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandEffect {
    Applied,
    /// Accepted but postponed (deregistering a busy robot).
    Deferred,
    /// Nothing to do (removing an absent blueprint).
    NoOp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandResult {
    pub effect: CommandEffect,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotStatus {
    pub robot: RobotId,
    pub state: Lifecycle,
    pub capabilities: CapabilitySet,
    pub tasks_completed: u64,
    #[serde(default)]
    pub deregistration_pending: bool,
}

/// Message payload. Serialized with its kind tag next to the body so trace
/// records read `"content_kind": ..., "content": {...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "content_kind", content = "content", rename_all = "snake_case")]
pub enum Content {
    Request(Request),
    RequestAck(Request),
    Rejection(Rejection),
    Blueprint(PlanBlueprint),
    PlanAccepted(PlanAccepted),
    PlanFailure(PlanFailureReport),
    VerifiedPlan(VerifiedPlan),
    TaskAssignment(TaskAssignment),
    TaskFeedback(TaskFeedback),
    Execution(ExecutionReport),
    Outcome(RequestOutcome),
    Registry(RegistryCommand),
    BlueprintCommand(BlueprintCommand),
    CommandResult(CommandResult),
    RobotStatus(RobotStatus),
}

impl Content {
    pub fn kind(&self) -> &'static str {
        match self {
            Content::Request(_) => "request",
            Content::RequestAck(_) => "request_ack",
            Content::Rejection(_) => "rejection",
            Content::Blueprint(_) => "blueprint",
            Content::PlanAccepted(_) => "plan_accepted",
            Content::PlanFailure(_) => "plan_failure",
            Content::VerifiedPlan(_) => "verified_plan",
            Content::TaskAssignment(_) => "task_assignment",
            Content::TaskFeedback(_) => "task_feedback",
            Content::Execution(_) => "execution",
            Content::Outcome(_) => "outcome",
            Content::Registry(_) => "registry",
            Content::BlueprintCommand(_) => "blueprint_command",
            Content::CommandResult(_) => "command_result",
            Content::RobotStatus(_) => "robot_status",
        }
    }

    /// Protocol table: which performatives may carry this content.
    pub fn permits(&self, p: Performative) -> bool {
        use Performative::*;
        match self {
            Content::Request(_)
            | Content::Blueprint(_)
            | Content::VerifiedPlan(_)
            | Content::TaskAssignment(_)
            | Content::Registry(_)
            | Content::BlueprintCommand(_) => p == Request,
            Content::RequestAck(_) | Content::PlanAccepted(_) | Content::CommandResult(_) => p == Agree,
            Content::Rejection(_) => p == Refuse,
            Content::PlanFailure(_) => p == Failure,
            Content::RobotStatus(_) => p == Inform,
            Content::TaskFeedback(_) => p == Inform || p == Failure,
            Content::Execution(r) => (p == Inform && r.failure.is_none()) || (p == Failure && r.failure.is_some()),
            Content::Outcome(o) => match o.status {
                OutcomeStatus::Success => p == Inform,
                OutcomeStatus::Failed(_) => p == Failure,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AclMessage {
    pub performative: Performative,
    pub sender: AgentId,
    pub receiver: AgentId,
    pub conversation_id: String,
    #[serde(flatten)]
    pub content: Content,
}

impl AclMessage {
    pub fn new(
        performative: Performative,
        sender: impl Into<String>,
        receiver: impl Into<String>,
        conversation_id: impl Into<String>,
        content: Content,
    ) -> Self {
        AclMessage {
            performative,
            sender: AgentId::new(sender),
            receiver: AgentId::new(receiver),
            conversation_id: conversation_id.into(),
            content,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub service_name: String,
    pub provider: AgentId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryReceipt {
    /// Bus-wide delivery sequence number.
    pub seq: u64,
    /// Runtime-local address of the receiver.
    pub address: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BusError {
    #[error("agent name `{0}` is already registered")]
    DuplicateName(String),
    #[error("agent `{0}` is not registered")]
    UnknownAgent(String),
    #[error("message to `{receiver}` is undeliverable")]
    Undeliverable { receiver: String },
    #[error("message has an empty conversation id")]
    EmptyConversation,
    #[error("performative {performative:?} cannot carry `{content_kind}` content")]
    ProtocolMismatch {
        performative: Performative,
        content_kind: &'static str,
    },
}

#[derive(Debug)]
struct Slot {
    address: u32,
    mailbox: VecDeque<AclMessage>,
}

/// Agent directory plus mailboxes.
#[derive(Debug, Default)]
pub struct Bus {
    agents: BTreeMap<AgentId, Slot>,
    next_address: u32,
    directory: Vec<ServiceEntry>,
    delivered: u64,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_agent(&mut self, name: &str) -> Result<AgentId, BusError> {
        let id = AgentId::new(name);
        if self.agents.contains_key(&id) {
            return Err(BusError::DuplicateName(name.to_owned()));
        }
        self.next_address += 1;
        self.agents.insert(
            id.clone(),
            Slot {
                address: self.next_address,
                mailbox: VecDeque::new(),
            },
        );
        Ok(id)
    }

    /// Removes the agent, its mailbox, and all of its directory entries.
    pub fn deregister_agent(&mut self, id: &AgentId) -> Result<(), BusError> {
        self.agents
            .remove(id)
            .ok_or_else(|| BusError::UnknownAgent(id.name().to_owned()))?;
        self.directory.retain(|e| &e.provider != id);
        Ok(())
    }

    pub fn is_registered(&self, id: &AgentId) -> bool {
        self.agents.contains_key(id)
    }

    pub fn address(&self, id: &AgentId) -> Option<u32> {
        self.agents.get(id).map(|s| s.address)
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentId> {
        self.agents.keys()
    }

    pub fn publish_service(&mut self, provider: &AgentId, service: &str) -> Result<(), BusError> {
        if !self.is_registered(provider) {
            return Err(BusError::UnknownAgent(provider.name().to_owned()));
        }
        let exists = self
            .directory
            .iter()
            .any(|e| &e.provider == provider && e.service_name == service);
        if !exists {
            self.directory.push(ServiceEntry {
                service_name: service.to_owned(),
                provider: provider.clone(),
            });
        }
        Ok(())
    }

    /// Providers of `service`, in publication order. Unknown services yield
    /// an empty list.
    pub fn lookup_service(&self, service: &str) -> Vec<AgentId> {
        self.directory
            .iter()
            .filter(|e| e.service_name == service)
            .map(|e| e.provider.clone())
            .collect()
    }

    /// Checks a message could be sent right now without enqueuing it.
    pub fn check(&self, msg: &AclMessage) -> Result<(), BusError> {
        if msg.conversation_id.is_empty() {
            return Err(BusError::EmptyConversation);
        }
        if !msg.content.permits(msg.performative) {
            return Err(BusError::ProtocolMismatch {
                performative: msg.performative,
                content_kind: msg.content.kind(),
            });
        }
        if !self.is_registered(&msg.sender) {
            return Err(BusError::UnknownAgent(msg.sender.name().to_owned()));
        }
        if !self.is_registered(&msg.receiver) {
            return Err(BusError::Undeliverable {
                receiver: msg.receiver.name().to_owned(),
            });
        }
        Ok(())
    }

    /// Appends the message to the receiver's mailbox.
    ///
    /// Only the receiver has to be registered at this point: a sender may
    /// leave the platform while its last message is in flight.
    pub fn send(&mut self, msg: AclMessage) -> Result<DeliveryReceipt, BusError> {
        if msg.conversation_id.is_empty() {
            return Err(BusError::EmptyConversation);
        }
        if !msg.content.permits(msg.performative) {
            return Err(BusError::ProtocolMismatch {
                performative: msg.performative,
                content_kind: msg.content.kind(),
            });
        }
        let slot = self
            .agents
            .get_mut(&msg.receiver)
            .ok_or_else(|| BusError::Undeliverable {
                receiver: msg.receiver.name().to_owned(),
            })?;
        slot.mailbox.push_back(msg);
        self.delivered += 1;
        Ok(DeliveryReceipt {
            seq: self.delivered,
            address: slot.address,
        })
    }

    pub fn receive(&mut self, id: &AgentId) -> Option<AclMessage> {
        self.agents.get_mut(id)?.mailbox.pop_front()
    }

    pub fn pending(&self, id: &AgentId) -> usize {
        self.agents.get(id).map_or(0, |s| s.mailbox.len())
    }

    pub fn delivered_count(&self) -> u64 {
        self.delivered
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::example_blueprint;
    use proptest::prelude::*;

    fn blueprint_msg(conv: &str) -> AclMessage {
        AclMessage::new(
            Performative::Request,
            names::RQM,
            names::PLN,
            conv,
            Content::Blueprint(example_blueprint()),
        )
    }

    #[test]
    fn registration_is_unique() {
        let mut bus = Bus::new();
        assert_eq!(bus.register_agent("RqM").unwrap(), AgentId::new("RqM"));
        assert_eq!(bus.register_agent("RqM"), Err(BusError::DuplicateName("RqM".into())));
        let ids: Vec<_> = ["R1", "R2", "R3"]
            .iter()
            .map(|n| bus.register_agent(n).unwrap())
            .collect();
        let addrs: std::collections::BTreeSet<_> = ids.iter().map(|i| bus.address(i).unwrap()).collect();
        assert_eq!(addrs.len(), 3);
    }

    #[test]
    fn directory_lookup() {
        let mut bus = Bus::new();
        let r1 = bus.register_agent("R1").unwrap();
        let r3 = bus.register_agent("R3").unwrap();
        bus.publish_service(&r1, "capability:C2").unwrap();
        assert_eq!(bus.lookup_service("capability:C2"), vec![r1.clone()]);
        bus.publish_service(&r3, "capability:C2").unwrap();
        bus.publish_service(&r1, "capability:C2").unwrap();
        assert_eq!(bus.lookup_service("capability:C2"), vec![r1.clone(), r3.clone()]);
        assert!(bus.lookup_service("capability:C9").is_empty());

        bus.deregister_agent(&r1).unwrap();
        assert_eq!(bus.lookup_service("capability:C2"), vec![r3]);
    }

    #[test]
    fn send_and_receive() {
        let mut bus = Bus::new();
        bus.register_agent(names::RQM).unwrap();
        bus.register_agent(names::PLN).unwrap();
        bus.register_agent(names::RBM).unwrap();
        let receipt = bus.send(blueprint_msg("req-1")).unwrap();
        assert_eq!(receipt.seq, 1);
        let pv = VerifiedPlan {
            blueprint_id: BlueprintId::new("Pb2"),
            request_id: RequestId::new("req-1"),
            assignments: vec![],
        };
        bus.send(AclMessage::new(
            Performative::Request,
            names::PLN,
            names::RBM,
            "req-1",
            Content::VerifiedPlan(pv),
        ))
        .unwrap();
        let got = bus.receive(&AgentId::new(names::PLN)).unwrap();
        assert_eq!(got.content.kind(), "blueprint");
        assert_eq!(bus.pending(&AgentId::new(names::RBM)), 1);
    }

    #[test]
    fn send_to_departed_agent_is_undeliverable() {
        let mut bus = Bus::new();
        bus.register_agent(names::RBM).unwrap();
        let r2 = bus.register_agent("R2").unwrap();
        bus.deregister_agent(&r2).unwrap();
        let msg = AclMessage::new(
            Performative::Request,
            names::RBM,
            "R2",
            "req-1/T1",
            Content::TaskAssignment(TaskAssignment {
                request_id: RequestId::new("req-1"),
                task: Task::new("T1", ["C1"]),
                robot: RobotId::new("R2"),
            }),
        );
        assert_eq!(bus.check(&msg), Err(BusError::Undeliverable { receiver: "R2".into() }));
        assert_eq!(bus.send(msg), Err(BusError::Undeliverable { receiver: "R2".into() }));
    }

    #[test]
    fn protocol_table_enforced() {
        let mut bus = Bus::new();
        bus.register_agent(names::RQM).unwrap();
        bus.register_agent(names::PLN).unwrap();
        let mut msg = blueprint_msg("c");
        msg.performative = Performative::Inform;
        assert!(matches!(bus.send(msg), Err(BusError::ProtocolMismatch { .. })));
        assert_eq!(bus.send(blueprint_msg("")), Err(BusError::EmptyConversation));
    }

    #[test]
    fn message_json_shape() {
        let text = serde_json::to_string(&blueprint_msg("req-7")).unwrap();
        assert!(text.starts_with(
            r#"{"performative":"request","sender":"RqM","receiver":"PLN","conversation_id":"req-7","content_kind":"blueprint","content":{"id":"Pb2""#
        ));
        let back: AclMessage = serde_json::from_str(&text).unwrap();
        assert_eq!(back, blueprint_msg("req-7"));
    }

    proptest! {
        // Per-receiver FIFO, no loss, no duplication.
        #[test]
        fn fifo_no_loss_no_dup(sends in proptest::collection::vec((0usize..3, 0usize..3), 0..60)) {
            let names = ["A", "B", "C"];
            let mut bus = Bus::new();
            for n in names { bus.register_agent(n).unwrap(); }
            let mut expected: BTreeMap<&str, Vec<String>> = BTreeMap::new();
            for (i, (s, r)) in sends.iter().enumerate() {
                let conv = format!("m{i}");
                let msg = AclMessage::new(
                    Performative::Inform, names[*s], names[*r], conv.clone(),
                    Content::RobotStatus(RobotStatus {
                        robot: RobotId::new("R1"),
                        state: Lifecycle::Uncontrolled,
                        capabilities: Default::default(),
                        tasks_completed: 0,
                        deregistration_pending: false,
                    }),
                );
                bus.send(msg).unwrap();
                expected.entry(names[*r]).or_default().push(conv);
            }
            let mut total = 0;
            for n in names {
                let id = AgentId::new(n);
                let mut got = Vec::new();
                while let Some(m) = bus.receive(&id) { got.push(m.conversation_id); }
                total += got.len();
                prop_assert_eq!(got, expected.remove(n).unwrap_or_default());
            }
            prop_assert_eq!(total, sends.len());
            prop_assert_eq!(bus.delivered_count(), sends.len() as u64);
        }
    }
}
