//! Token-based execution of a [`ProcessDefinition`].
//!
//! An instance is a plain value: a multiset of tokens waiting at nodes plus
//! per-merge bookkeeping of arrived (and, for inclusive merges, activated)
//! branches. [`step_instance`] advances every ready token by one node and
//! returns the action keys the host must perform before the next step; the
//! host writes the condition values those actions decide into the
//! [`ConditionEnv`] consulted by downstream splits.

use std::collections::{BTreeMap, BTreeSet};

use super::definition::{NodeKind, ProcessDefinition};
use super::gateway::{self, Direction, GatewayFault, GatewayKind};

/// Host-supplied boolean conditions, keyed by the condition names on split
/// edges.
pub type ConditionEnv = BTreeMap<String, bool>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorkflowFault {
    #[error("gateway `{node}`: {fault}")]
    Gateway { node: String, fault: GatewayFault },
    #[error("split `{node}` needs condition `{key}`, which the host did not set")]
    UnboundCondition { node: String, key: String },
    #[error("inclusive split `{0}` activated again before its merge fired")]
    ReentrantInclusive(String),
    #[error("process stalled with tokens waiting at {0:?}")]
    Deadlock(Vec<String>),
    #[error("process did not finish within {0} steps")]
    StepLimit(usize),
    #[error("instance belongs to `{instance}`, not `{definition}`")]
    DefinitionMismatch { instance: String, definition: String },
    #[error("action `{key}` failed: {message}")]
    Action { key: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct MergeState {
    arrived: BTreeMap<usize, u32>,
    activated: Option<BTreeSet<usize>>,
}

impl MergeState {
    fn is_idle(&self) -> bool {
        self.arrived.is_empty() && self.activated.is_none()
    }

    fn arrived_set(&self) -> BTreeSet<usize> {
        self.arrived.iter().filter(|(_, &n)| n > 0).map(|(&e, _)| e).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessInstance {
    definition_id: String,
    tokens: Vec<usize>,
    merges: BTreeMap<usize, MergeState>,
}

impl ProcessInstance {
    /// A fresh instance with one token on the start node.
    pub fn start(def: &ProcessDefinition) -> Self {
        ProcessInstance {
            definition_id: def.id().to_owned(),
            tokens: vec![def.start()],
            merges: BTreeMap::new(),
        }
    }

    pub fn definition_id(&self) -> &str {
        &self.definition_id
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Node ids currently holding a token, sorted, with multiplicity.
    pub fn token_nodes<'d>(&self, def: &'d ProcessDefinition) -> Vec<&'d str> {
        let mut ids: Vec<&str> = self.tokens.iter().map(|&n| def.node(n).id.as_str()).collect();
        ids.sort_unstable();
        ids
    }

    pub fn is_complete(&self) -> bool {
        self.tokens.is_empty() && self.merges.values().all(MergeState::is_idle)
    }
}

struct Stepper<'d> {
    def: &'d ProcessDefinition,
    next: Vec<usize>,
    merges: BTreeMap<usize, MergeState>,
}

impl Stepper<'_> {
    fn advance(&mut self, edge: usize) -> Result<(), WorkflowFault> {
        let target = self.def.edge_target(edge);
        match self.def.node(target).kind {
            NodeKind::Gateway {
                kind,
                direction: Direction::Merge,
            } => {
                let state = self.merges.entry(target).or_default();
                if kind == GatewayKind::InclusiveOr && !state.activated.as_ref().is_some_and(|a| a.contains(&edge)) {
                    return Err(WorkflowFault::Gateway {
                        node: self.def.node(target).id.clone(),
                        fault: GatewayFault::UnactivatedArrival,
                    });
                }
                *state.arrived.entry(edge).or_default() += 1;
            }
            _ => self.next.push(target),
        }
        Ok(())
    }

    /// Fires every merge whose firing rule is met; returns how many fired.
    fn fire_merges(&mut self) -> Result<usize, WorkflowFault> {
        let mut order: Vec<usize> = self
            .merges
            .iter()
            .filter(|(_, s)| !s.arrived.is_empty())
            .map(|(&m, _)| m)
            .collect();
        order.sort_by(|a, b| self.def.node(*a).id.cmp(&self.def.node(*b).id));

        let def = self.def;
        let mut fired = 0;
        for m in order {
            let NodeKind::Gateway { kind, .. } = def.node(m).kind else {
                unreachable!("merge state only exists for merge gateways");
            };
            let out = def.outgoing(m)[0];
            let node_err = |fault| WorkflowFault::Gateway {
                node: def.node(m).id.clone(),
                fault,
            };
            let state = self.merges.get_mut(&m).expect("listed above");
            let mut firings = 0;
            match kind {
                GatewayKind::ExclusiveOr => {
                    let declared: BTreeSet<usize> = def.incoming(m).iter().copied().collect();
                    let arrived = state.arrived_set();
                    if gateway::merge_fire(kind, &arrived, &declared).map_err(node_err)? {
                        firings = state.arrived.values().sum::<u32>();
                        state.arrived.clear();
                    }
                }
                GatewayKind::ParallelAnd => {
                    let declared: BTreeSet<usize> = def.incoming(m).iter().copied().collect();
                    while gateway::merge_fire(kind, &state.arrived_set(), &declared).map_err(node_err)? {
                        for e in &declared {
                            let n = state.arrived.get_mut(e).expect("arrived");
                            *n -= 1;
                        }
                        state.arrived.retain(|_, n| *n > 0);
                        firings += 1;
                    }
                }
                GatewayKind::InclusiveOr => {
                    let activated = state.activated.clone().unwrap_or_default();
                    if gateway::merge_fire(kind, &state.arrived_set(), &activated).map_err(node_err)? {
                        state.arrived.clear();
                        state.activated = None;
                        firings = 1;
                    }
                }
            }
            for _ in 0..firings {
                self.advance(out)?;
            }
            fired += firings as usize;
        }
        self.merges.retain(|_, s| !s.is_idle());
        Ok(fired)
    }

    fn run_node(&mut self, node: usize, env: &ConditionEnv, actions: &mut Vec<String>) -> Result<(), WorkflowFault> {
        let def = self.def;
        let n = def.node(node);
        match &n.kind {
            NodeKind::Event | NodeKind::Action(_) => {
                if let NodeKind::Action(key) = &n.kind {
                    actions.push(key.clone());
                }
                if let Some(&edge) = def.outgoing(node).first() {
                    self.advance(edge)?;
                }
            }
            NodeKind::Gateway {
                kind,
                direction: Direction::Split,
            } => {
                let mut branches = Vec::new();
                let mut default = None;
                for &e in def.outgoing(node) {
                    let edge = def.edge(e);
                    if edge.default {
                        default = Some(e);
                        continue;
                    }
                    let value = match (&edge.condition, kind) {
                        (_, GatewayKind::ParallelAnd) => true,
                        (Some(key), _) => *env.get(key).ok_or_else(|| WorkflowFault::UnboundCondition {
                            node: n.id.clone(),
                            key: key.clone(),
                        })?,
                        (None, _) => false,
                    };
                    branches.push((e, value));
                }
                let taken =
                    gateway::split(*kind, &branches, default.as_ref()).map_err(|fault| WorkflowFault::Gateway {
                        node: n.id.clone(),
                        fault,
                    })?;
                if let Some(pairing) = def.pairing(node) {
                    let state = self.merges.entry(pairing.merge).or_default();
                    if state.activated.is_some() {
                        return Err(WorkflowFault::ReentrantInclusive(n.id.clone()));
                    }
                    state.activated = Some(taken.iter().map(|e| pairing.branches[e]).collect());
                }
                for e in taken {
                    self.advance(e)?;
                }
            }
            NodeKind::Gateway {
                direction: Direction::Merge,
                ..
            } => unreachable!("tokens never wait on merge nodes"),
        }
        Ok(())
    }
}

/// Advances every ready token by one node.
///
/// Merges whose inputs arrived in earlier steps fire first, then the tokens
/// present at the start of the step run in node-id order. Returns the updated
/// instance and the action keys emitted, in execution order.
pub fn step_instance(
    def: &ProcessDefinition,
    instance: ProcessInstance,
    env: &ConditionEnv,
) -> Result<(ProcessInstance, Vec<String>), WorkflowFault> {
    if instance.definition_id != def.id() {
        return Err(WorkflowFault::DefinitionMismatch {
            instance: instance.definition_id,
            definition: def.id().to_owned(),
        });
    }
    let ProcessInstance {
        definition_id,
        mut tokens,
        merges,
    } = instance;
    tokens.sort_by(|a, b| def.node(*a).id.cmp(&def.node(*b).id));

    let mut stepper = Stepper {
        def,
        next: Vec::new(),
        merges,
    };
    let fired = stepper.fire_merges()?;
    if tokens.is_empty() && fired == 0 && !stepper.merges.is_empty() {
        let mut waiting: Vec<String> = stepper.merges.keys().map(|&m| def.node(m).id.clone()).collect();
        waiting.sort();
        return Err(WorkflowFault::Deadlock(waiting));
    }

    let mut actions = Vec::new();
    for node in tokens {
        stepper.run_node(node, env, &mut actions)?;
    }
    Ok((
        ProcessInstance {
            definition_id,
            tokens: stepper.next,
            merges: stepper.merges,
        },
        actions,
    ))
}

/// Host side of a process: performs the actions the engine emits.
pub trait ActionHandler {
    /// Performs `action`, optionally recording condition values in `env`.
    fn perform(&mut self, action: &str, env: &mut ConditionEnv) -> Result<(), String>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    pub actions: Vec<String>,
    pub steps: usize,
    pub env: ConditionEnv,
}

/// Runs a fresh instance to completion, handing each emitted action to
/// `handler` before the next step.
pub fn run<H: ActionHandler + ?Sized>(
    def: &ProcessDefinition,
    mut env: ConditionEnv,
    handler: &mut H,
) -> Result<RunReport, WorkflowFault> {
    let limit = def.nodes().len() + 2;
    let mut instance = ProcessInstance::start(def);
    let mut performed = Vec::new();
    let mut steps = 0;
    while !instance.is_complete() {
        if steps == limit {
            return Err(WorkflowFault::StepLimit(limit));
        }
        let (next, actions) = step_instance(def, instance, &env)?;
        steps += 1;
        for key in actions {
            handler
                .perform(&key, &mut env)
                .map_err(|message| WorkflowFault::Action {
                    key: key.clone(),
                    message,
                })?;
            performed.push(key);
        }
        instance = next;
    }
    Ok(RunReport {
        actions: performed,
        steps,
        env,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::definition::{Edge, Node};

    fn diamond(kind: GatewayKind, conds: bool) -> ProcessDefinition {
        let c = |from: &str, to: &str, key: &str| {
            if conds {
                Edge::when(from, to, key)
            } else {
                Edge::new(from, to)
            }
        };
        ProcessDefinition::new(
            "diamond",
            "begin",
            vec![
                Node::event("begin"),
                Node::gateway("fork", kind, Direction::Split),
                Node::action("left", "left"),
                Node::action("right", "right"),
                Node::gateway("join", kind, Direction::Merge),
                Node::action("after", "after"),
            ],
            vec![
                Edge::new("begin", "fork"),
                c("fork", "left", "go_left"),
                c("fork", "right", "go_right"),
                Edge::new("left", "join"),
                Edge::new("right", "join"),
                Edge::new("join", "after"),
            ],
        )
        .unwrap()
    }

    struct Recorder(Vec<String>);

    impl ActionHandler for Recorder {
        fn perform(&mut self, action: &str, _env: &mut ConditionEnv) -> Result<(), String> {
            self.0.push(action.to_owned());
            Ok(())
        }
    }

    #[test]
    fn action_token_moves_along_single_edge() {
        let def = diamond(GatewayKind::ParallelAnd, false);
        let inst = ProcessInstance::start(&def);
        let (inst, actions) = step_instance(&def, inst, &ConditionEnv::new()).unwrap();
        assert!(actions.is_empty());
        assert_eq!(inst.token_nodes(&def), vec!["fork"]);
        let (inst, actions) = step_instance(&def, inst, &ConditionEnv::new()).unwrap();
        assert!(actions.is_empty());
        assert_eq!(inst.token_nodes(&def), vec!["left", "right"]);
        let (inst, actions) = step_instance(&def, inst, &ConditionEnv::new()).unwrap();
        assert_eq!(actions, vec!["left", "right"]);
        assert_eq!(inst.token_count(), 0);
        assert!(!inst.is_complete(), "arrivals wait at the merge");
    }

    #[test]
    fn parallel_diamond_one_in_one_out() {
        let def = diamond(GatewayKind::ParallelAnd, false);
        let mut rec = Recorder(vec![]);
        let report = run(&def, ConditionEnv::new(), &mut rec).unwrap();
        assert_eq!(rec.0, vec!["left", "right", "after"]);
        assert_eq!(report.actions.iter().filter(|a| *a == "after").count(), 1);
    }

    #[test]
    fn exclusive_split_follows_true_branch_only() {
        let def = diamond(GatewayKind::ExclusiveOr, true);
        let env = ConditionEnv::from([("go_left".into(), false), ("go_right".into(), true)]);
        let mut rec = Recorder(vec![]);
        run(&def, env, &mut rec).unwrap();
        assert_eq!(rec.0, vec!["right", "after"]);
    }

    #[test]
    fn unbound_condition_faults() {
        let def = diamond(GatewayKind::ExclusiveOr, true);
        let err = run(&def, ConditionEnv::new(), &mut Recorder(vec![])).unwrap_err();
        assert!(matches!(err, WorkflowFault::UnboundCondition { .. }));
    }

    #[test]
    fn inclusive_merge_waits_for_activated_branches() {
        let def = diamond(GatewayKind::InclusiveOr, true);
        for (l, r) in [(true, false), (false, true), (true, true)] {
            let env = ConditionEnv::from([("go_left".into(), l), ("go_right".into(), r)]);
            let mut rec = Recorder(vec![]);
            run(&def, env, &mut rec).unwrap();
            assert_eq!(rec.0.last().map(String::as_str), Some("after"));
            assert_eq!(rec.0.iter().filter(|a| *a == "after").count(), 1);
            assert_eq!(rec.0.len(), 1 + usize::from(l) + usize::from(r));
        }
    }

    #[test]
    fn ambiguous_exclusive_split_aborts() {
        let def = diamond(GatewayKind::ExclusiveOr, true);
        let env = ConditionEnv::from([("go_left".into(), true), ("go_right".into(), true)]);
        let err = run(&def, env, &mut Recorder(vec![])).unwrap_err();
        assert_eq!(
            err,
            WorkflowFault::Gateway {
                node: "fork".into(),
                fault: GatewayFault::Ambiguous(2)
            }
        );
    }

    #[test]
    fn exclusive_merge_fires_per_arrival() {
        // parallel split feeding an exclusive merge passes both tokens through
        let def = ProcessDefinition::new(
            "p",
            "fork",
            vec![
                Node::gateway("fork", GatewayKind::ParallelAnd, Direction::Split),
                Node::action("a", "a"),
                Node::action("b", "b"),
                Node::gateway("join", GatewayKind::ExclusiveOr, Direction::Merge),
                Node::action("after", "after"),
            ],
            vec![
                Edge::new("fork", "a"),
                Edge::new("fork", "b"),
                Edge::new("a", "join"),
                Edge::new("b", "join"),
                Edge::new("join", "after"),
            ],
        )
        .unwrap();
        let mut rec = Recorder(vec![]);
        run(&def, ConditionEnv::new(), &mut rec).unwrap();
        assert_eq!(rec.0, vec!["a", "b", "after", "after"]);
    }

    #[test]
    fn parallel_merge_behind_exclusive_split_deadlocks() {
        let def = ProcessDefinition::new(
            "p",
            "fork",
            vec![
                Node::gateway("fork", GatewayKind::ExclusiveOr, Direction::Split),
                Node::action("a", "a"),
                Node::action("b", "b"),
                Node::gateway("join", GatewayKind::ParallelAnd, Direction::Merge),
                Node::event("end"),
            ],
            vec![
                Edge::when("fork", "a", "x"),
                Edge::otherwise("fork", "b"),
                Edge::new("a", "join"),
                Edge::new("b", "join"),
                Edge::new("join", "end"),
            ],
        )
        .unwrap();
        let env = ConditionEnv::from([("x".into(), true)]);
        let err = run(&def, env, &mut Recorder(vec![])).unwrap_err();
        assert_eq!(err, WorkflowFault::Deadlock(vec!["join".into()]));
    }
}
