//! Knowledge base: the blueprint store and the robot registry.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{
    robot_can_perform, validate_blueprint, BlueprintViolation, CapabilitySet, PlanBlueprint, RequestKind, RobotId,
    Task, TaskId,
};
use crate::metrics::RobotClock;
use crate::time::SimTime;

pub const DEFAULT_MAX_ROBOTS: usize = 3;

/// Robot lifecycle. A robot leaves `Controlled` only through task
/// completion or abandonment, never directly to `Unregistered`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Unregistered,
    Uncontrolled,
    Controlled,
}

impl Lifecycle {
    pub fn is_registered(self) -> bool {
        self != Lifecycle::Unregistered
    }
}

impl fmt::Display for Lifecycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lifecycle::Unregistered => "unregistered",
            Lifecycle::Uncontrolled => "uncontrolled",
            Lifecycle::Controlled => "controlled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RobotRecord {
    pub id: RobotId,
    pub capabilities: CapabilitySet,
    pub lifecycle: Lifecycle,
    pub tasks_completed: u64,
    pub current_task: Option<TaskId>,
    pub clock: RobotClock,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KbError {
    #[error("registry is full ({max} robots registered)")]
    Capacity { max: usize },
    #[error("robot {0} is already registered")]
    AlreadyRegistered(RobotId),
    #[error("robot {0} is not registered")]
    NotRegistered(RobotId),
    #[error("robot {0} is unknown")]
    UnknownRobot(RobotId),
    #[error("robot {0} is executing a task")]
    Busy(RobotId),
    #[error("robot {0} is not executing a task")]
    Idle(RobotId),
    #[error("invalid blueprint: {}", describe(.0))]
    InvalidBlueprint(Vec<BlueprintViolation>),
}

fn describe(violations: &[BlueprintViolation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlueprintChange {
    Inserted,
    Replaced,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    blueprints: BTreeMap<RequestKind, PlanBlueprint>,
    robots: BTreeMap<RobotId, RobotRecord>,
    max_robots: usize,
}

impl Default for KnowledgeBase {
    fn default() -> Self {
        KnowledgeBase::new(DEFAULT_MAX_ROBOTS)
    }
}

impl KnowledgeBase {
    pub fn new(max_robots: usize) -> Self {
        KnowledgeBase {
            blueprints: BTreeMap::new(),
            robots: BTreeMap::new(),
            max_robots,
        }
    }

    pub fn max_robots(&self) -> usize {
        self.max_robots
    }

    pub fn find_blueprint(&self, kind: &RequestKind) -> Option<&PlanBlueprint> {
        self.blueprints.get(kind)
    }

    pub fn blueprints(&self) -> impl Iterator<Item = &PlanBlueprint> {
        self.blueprints.values()
    }

    pub fn upsert_blueprint(&mut self, pb: PlanBlueprint) -> Result<BlueprintChange, KbError> {
        validate_blueprint(&pb).map_err(KbError::InvalidBlueprint)?;
        let change = if self.blueprints.contains_key(&pb.request_kind) {
            BlueprintChange::Replaced
        } else {
            BlueprintChange::Inserted
        };
        self.blueprints.insert(pb.request_kind.clone(), pb);
        Ok(change)
    }

    /// Removes the blueprint serving `kind`; `None` means there was none.
    pub fn remove_blueprint(&mut self, kind: &RequestKind) -> Option<PlanBlueprint> {
        self.blueprints.remove(kind)
    }

    /// Adds a robot the registry knows about without registering it.
    /// The record's clock starts at `at`.
    pub fn add_known_robot(&mut self, id: RobotId, capabilities: CapabilitySet, history: u64, at: SimTime) {
        self.robots.entry(id.clone()).or_insert_with(|| RobotRecord {
            id,
            capabilities,
            lifecycle: Lifecycle::Unregistered,
            tasks_completed: history,
            current_task: None,
            clock: RobotClock::new(at),
        });
    }

    /// Registers a robot, recording its (possibly new) capability set.
    /// Unknown ids are added to the registry.
    pub fn register_robot(&mut self, id: &RobotId, capabilities: CapabilitySet, at: SimTime) -> Result<(), KbError> {
        if self.robots.get(id).is_some_and(|r| r.lifecycle.is_registered()) {
            return Err(KbError::AlreadyRegistered(id.clone()));
        }
        if self.registered_count() >= self.max_robots {
            return Err(KbError::Capacity { max: self.max_robots });
        }
        self.add_known_robot(id.clone(), capabilities.clone(), 0, at);
        let rec = self.robots.get_mut(id).expect("just inserted");
        rec.capabilities = capabilities;
        rec.lifecycle = Lifecycle::Uncontrolled;
        rec.clock.transition(at, Lifecycle::Uncontrolled);
        Ok(())
    }

    pub fn deregister_robot(&mut self, id: &RobotId, at: SimTime) -> Result<(), KbError> {
        let rec = self
            .robots
            .get_mut(id)
            .ok_or_else(|| KbError::UnknownRobot(id.clone()))?;
        match rec.lifecycle {
            Lifecycle::Unregistered => Err(KbError::NotRegistered(id.clone())),
            Lifecycle::Controlled => Err(KbError::Busy(id.clone())),
            Lifecycle::Uncontrolled => {
                rec.lifecycle = Lifecycle::Unregistered;
                rec.clock.transition(at, Lifecycle::Unregistered);
                Ok(())
            }
        }
    }

    /// Marks an idle registered robot as executing `task`.
    pub fn start_task(&mut self, id: &RobotId, task: TaskId, at: SimTime) -> Result<(), KbError> {
        let rec = self
            .robots
            .get_mut(id)
            .ok_or_else(|| KbError::UnknownRobot(id.clone()))?;
        match rec.lifecycle {
            Lifecycle::Unregistered => Err(KbError::NotRegistered(id.clone())),
            Lifecycle::Controlled => Err(KbError::Busy(id.clone())),
            Lifecycle::Uncontrolled => {
                rec.lifecycle = Lifecycle::Controlled;
                rec.current_task = Some(task);
                rec.clock.transition(at, Lifecycle::Controlled);
                Ok(())
            }
        }
    }

    /// Ends the robot's in-flight task (completed or abandoned).
    pub fn finish_task(&mut self, id: &RobotId, at: SimTime) -> Result<TaskId, KbError> {
        let rec = self
            .robots
            .get_mut(id)
            .ok_or_else(|| KbError::UnknownRobot(id.clone()))?;
        if rec.lifecycle != Lifecycle::Controlled {
            return Err(KbError::Idle(id.clone()));
        }
        rec.lifecycle = Lifecycle::Uncontrolled;
        rec.clock.transition(at, Lifecycle::Uncontrolled);
        Ok(rec.current_task.take().expect("controlled robot has a task"))
    }

    pub fn increment_history(&mut self, id: &RobotId) -> Result<u64, KbError> {
        let rec = self
            .robots
            .get_mut(id)
            .ok_or_else(|| KbError::UnknownRobot(id.clone()))?;
        rec.tasks_completed += 1;
        Ok(rec.tasks_completed)
    }

    /// Registered robots able to perform `task`, ordered by id.
    pub fn capable_robots(&self, task: &Task) -> Vec<RobotId> {
        self.robots
            .values()
            .filter(|r| r.lifecycle.is_registered() && robot_can_perform(&r.capabilities, task))
            .map(|r| r.id.clone())
            .collect()
    }

    pub fn robot(&self, id: &RobotId) -> Option<&RobotRecord> {
        self.robots.get(id)
    }

    pub fn robots(&self) -> impl Iterator<Item = &RobotRecord> {
        self.robots.values()
    }

    pub fn registered(&self) -> impl Iterator<Item = &RobotRecord> {
        self.robots.values().filter(|r| r.lifecycle.is_registered())
    }

    pub fn registered_count(&self) -> usize {
        self.registered().count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{caps, example_blueprint, BlueprintId};
    use proptest::prelude::*;

    const T0: SimTime = SimTime::ZERO;

    fn fixture() -> KnowledgeBase {
        let mut kb = KnowledgeBase::default();
        kb.add_known_robot(RobotId::new("R1"), caps(["C1", "C2", "C3", "C4"]), 9, T0);
        kb.add_known_robot(RobotId::new("R2"), caps(["C2", "C4"]), 0, T0);
        kb.add_known_robot(RobotId::new("R3"), caps(["C2", "C5"]), 11, T0);
        kb.upsert_blueprint(example_blueprint()).unwrap();
        kb
    }

    fn register(kb: &mut KnowledgeBase, id: &str) -> Result<(), KbError> {
        let c = kb
            .robot(&RobotId::new(id))
            .map(|r| r.capabilities.clone())
            .unwrap_or_default();
        kb.register_robot(&RobotId::new(id), c, T0)
    }

    #[test]
    fn find_blueprint_by_kind() {
        let mut kb = fixture();
        let kind = RequestKind::new("Rq2");
        assert_eq!(kb.find_blueprint(&kind).unwrap().id, BlueprintId::new("Pb2"));
        assert!(kb.find_blueprint(&RequestKind::new("Rq9")).is_none());
        assert!(kb.remove_blueprint(&kind).is_some());
        assert!(kb.find_blueprint(&kind).is_none());
        assert!(kb.remove_blueprint(&kind).is_none());
    }

    #[test]
    fn upsert_validates_and_replaces() {
        let mut kb = fixture();
        let mut pb = example_blueprint();
        pb.tasks.push(Task::new("T4", ["C4"]));
        assert_eq!(kb.upsert_blueprint(pb), Ok(BlueprintChange::Replaced));
        assert_eq!(kb.find_blueprint(&RequestKind::new("Rq2")).unwrap().tasks.len(), 4);

        let empty = PlanBlueprint {
            tasks: vec![],
            ..example_blueprint()
        };
        assert_eq!(
            kb.upsert_blueprint(empty),
            Err(KbError::InvalidBlueprint(vec![BlueprintViolation::EmptyTaskList]))
        );
        assert_eq!(kb.find_blueprint(&RequestKind::new("Rq2")).unwrap().tasks.len(), 4);
    }

    #[test]
    fn registration_respects_capacity() {
        let mut kb = fixture();
        register(&mut kb, "R1").unwrap();
        register(&mut kb, "R3").unwrap();
        assert_eq!(
            register(&mut kb, "R1"),
            Err(KbError::AlreadyRegistered(RobotId::new("R1")))
        );
        register(&mut kb, "R2").unwrap();
        assert_eq!(
            kb.register_robot(&RobotId::new("R4"), caps(["C1"]), T0),
            Err(KbError::Capacity { max: 3 })
        );
        assert_eq!(kb.registered_count(), 3);
    }

    #[test]
    fn reregistration_updates_capabilities() {
        let mut kb = fixture();
        register(&mut kb, "R1").unwrap();
        register(&mut kb, "R2").unwrap();
        let r2 = RobotId::new("R2");
        let c9 = Task::new("X", ["C9"]);
        assert!(kb.capable_robots(&c9).is_empty());
        kb.deregister_robot(&r2, SimTime::from_secs(5)).unwrap();
        kb.register_robot(&r2, caps(["C2", "C9"]), SimTime::from_secs(6))
            .unwrap();
        assert_eq!(kb.capable_robots(&c9), vec![r2]);
    }

    #[test]
    fn deregistration_errors() {
        let mut kb = fixture();
        assert_eq!(
            kb.deregister_robot(&RobotId::new("R9"), T0),
            Err(KbError::UnknownRobot(RobotId::new("R9")))
        );
        assert_eq!(
            kb.deregister_robot(&RobotId::new("R1"), T0),
            Err(KbError::NotRegistered(RobotId::new("R1")))
        );
        register(&mut kb, "R1").unwrap();
        kb.start_task(&RobotId::new("R1"), TaskId::new("T1"), T0).unwrap();
        assert_eq!(
            kb.deregister_robot(&RobotId::new("R1"), T0),
            Err(KbError::Busy(RobotId::new("R1")))
        );
    }

    #[test]
    fn capable_robots_examples() {
        let mut kb = fixture();
        let t2 = Task::new("T2", ["C2"]);
        assert!(kb.capable_robots(&t2).is_empty());
        register(&mut kb, "R3").unwrap();
        register(&mut kb, "R1").unwrap();
        assert_eq!(kb.capable_robots(&t2), vec![RobotId::new("R1"), RobotId::new("R3")]);
        assert_eq!(
            kb.capable_robots(&Task::new("T1", ["C1", "C3", "C4"])),
            vec![RobotId::new("R1")]
        );
    }

    #[test]
    fn history_increments() {
        let mut kb = fixture();
        assert_eq!(kb.increment_history(&RobotId::new("R1")), Ok(10));
        assert_eq!(kb.increment_history(&RobotId::new("R3")), Ok(12));
        assert_eq!(kb.increment_history(&RobotId::new("R2")), Ok(1));
        assert!(kb.increment_history(&RobotId::new("R7")).is_err());
    }

    #[test]
    fn task_lifecycle_drives_clock() {
        let mut kb = fixture();
        let r1 = RobotId::new("R1");
        kb.register_robot(&r1, caps(["C1"]), SimTime::from_secs(10)).unwrap();
        kb.start_task(&r1, TaskId::new("T1"), SimTime::from_secs(15)).unwrap();
        assert_eq!(kb.robot(&r1).unwrap().lifecycle, Lifecycle::Controlled);
        assert_eq!(kb.finish_task(&r1, SimTime::from_secs(35)), Ok(TaskId::new("T1")));
        let totals = kb.robot(&r1).unwrap().clock.totals_at(SimTime::from_secs(40));
        assert_eq!(totals.controlled_ms, 20_000);
        assert_eq!(totals.uncontrolled_ms, 10_000);
        assert_eq!(totals.unregistered_ms, 10_000);
        assert_eq!(totals.overall_ms, 40_000);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Register(u8, Vec<u8>),
        Deregister(u8),
        Start(u8),
        Finish(u8),
        Credit(u8),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..6, proptest::collection::vec(0u8..5, 0..4)).prop_map(|(r, c)| Op::Register(r, c)),
            (0u8..6).prop_map(Op::Deregister),
            (0u8..6).prop_map(Op::Start),
            (0u8..6).prop_map(Op::Finish),
            (0u8..6).prop_map(Op::Credit),
        ]
    }

    proptest! {
        #[test]
        fn registry_invariants(ops in proptest::collection::vec(op(), 0..80), need in proptest::collection::btree_set(0u8..5, 1..3)) {
            let mut kb = KnowledgeBase::new(3);
            let mut history: BTreeMap<RobotId, u64> = BTreeMap::new();
            for (i, op) in ops.into_iter().enumerate() {
                let at = SimTime::from_secs(i as u64);
                let _ = match op {
                    Op::Register(r, c) => kb.register_robot(
                        &RobotId::new(format!("R{r}")),
                        c.into_iter().map(|x| format!("C{x}").into()).collect(),
                        at,
                    ),
                    Op::Deregister(r) => kb.deregister_robot(&RobotId::new(format!("R{r}")), at),
                    Op::Start(r) => kb.start_task(&RobotId::new(format!("R{r}")), TaskId::new("T"), at),
                    Op::Finish(r) => kb.finish_task(&RobotId::new(format!("R{r}")), at).map(|_| ()),
                    Op::Credit(r) => kb.increment_history(&RobotId::new(format!("R{r}"))).map(|_| ()),
                };
                prop_assert!(kb.registered_count() <= kb.max_robots());
                for rec in kb.robots() {
                    let prev = history.insert(rec.id.clone(), rec.tasks_completed).unwrap_or(0);
                    prop_assert!(rec.tasks_completed >= prev);
                    prop_assert_eq!(rec.lifecycle == Lifecycle::Controlled, rec.current_task.is_some());
                    prop_assert_eq!(rec.clock.state(), rec.lifecycle);
                }
            }
            let task = Task { id: TaskId::new("X"), requires: need.into_iter().map(|x| format!("C{x}").into()).collect() };
            let brute: Vec<RobotId> = kb
                .robots()
                .filter(|r| r.lifecycle != Lifecycle::Unregistered)
                .filter(|r| task.requires.iter().all(|c| r.capabilities.contains(c)))
                .map(|r| r.id.clone())
                .collect();
            prop_assert_eq!(kb.capable_robots(&task), brute);
        }
    }
}
