//! Process definitions: structure, validation, and the `.process` document
//! format.
//!
//! A document is TOML with four top-level keys:
//!
//! ```toml
//! id = "example"
//! start = "begin"
//!
//! [[nodes]]
//! id = "begin"                 # no action, no gateway: a plain event node
//!
//! [[nodes]]
//! id = "decide"
//! gateway = "exclusive"        # exclusive | inclusive | parallel
//! direction = "split"          # split | merge
//!
//! [[nodes]]
//! id = "work"
//! action = "host.do_work"      # resolved by the host at run time
//!
//! [[edges]]
//! from = "decide"
//! to = "work"
//! condition = "should_work"    # required on exclusive/inclusive split edges
//!
//! [[edges]]
//! from = "decide"
//! to = "skip"
//! default = true               # optional exclusive-split fallback
//! ```
//!
//! End nodes are the nodes without outgoing edges.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::gateway::{Direction, GatewayKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    /// Start or end event; passes the token through.
    Event,
    Action(String),
    Gateway {
        kind: GatewayKind,
        direction: Direction,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
}

impl Node {
    pub fn event(id: &str) -> Self {
        Node {
            id: id.to_owned(),
            kind: NodeKind::Event,
        }
    }

    pub fn action(id: &str, key: &str) -> Self {
        Node {
            id: id.to_owned(),
            kind: NodeKind::Action(key.to_owned()),
        }
    }

    pub fn gateway(id: &str, kind: GatewayKind, direction: Direction) -> Self {
        Node {
            id: id.to_owned(),
            kind: NodeKind::Gateway { kind, direction },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub condition: Option<String>,
    pub default: bool,
}

impl Edge {
    pub fn new(from: &str, to: &str) -> Self {
        Edge {
            from: from.to_owned(),
            to: to.to_owned(),
            condition: None,
            default: false,
        }
    }

    pub fn when(from: &str, to: &str, condition: &str) -> Self {
        Edge {
            condition: Some(condition.to_owned()),
            ..Edge::new(from, to)
        }
    }

    pub fn otherwise(from: &str, to: &str) -> Self {
        Edge {
            default: true,
            ..Edge::new(from, to)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateNode(String),
    UnknownStart(String),
    DanglingEdge { from: String, to: String },
    DuplicateEdge { from: String, to: String },
    UnreachableNode(String),
    Cycle(Vec<String>),
    SplitFanOut { node: String, outgoing: usize },
    MergeFanIn { node: String, incoming: usize },
    MergeFanOut { node: String, outgoing: usize },
    ActionFanOut { node: String, outgoing: usize },
    MissingCondition { from: String, to: String },
    UnexpectedCondition { from: String, to: String },
    MisplacedDefault { from: String, to: String },
    MultipleDefaults(String),
    GatewayMissingDirection(String),
    DirectionWithoutGateway(String),
    ActionOnGateway(String),
    UnpairedInclusive { node: String, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateNode(n) => write!(f, "duplicate node id `{n}`"),
            Violation::UnknownStart(n) => write!(f, "start node `{n}` is not declared"),
            Violation::DanglingEdge { from, to } => {
                write!(f, "dangling edge {from} -> {to}: endpoint not declared")
            }
            Violation::DuplicateEdge { from, to } => write!(f, "duplicate edge {from} -> {to}"),
            Violation::UnreachableNode(n) => write!(f, "node `{n}` is unreachable from start"),
            Violation::Cycle(nodes) => write!(f, "cycle through {}", nodes.join(", ")),
            Violation::SplitFanOut { node, outgoing } => write!(
                f,
                "split gateway `{node}` needs at least 2 outgoing edges, has {outgoing}"
            ),
            Violation::MergeFanIn { node, incoming } => write!(
                f,
                "merge gateway `{node}` needs at least 2 incoming edges, has {incoming}"
            ),
            Violation::MergeFanOut { node, outgoing } => write!(
                f,
                "merge gateway `{node}` needs exactly 1 outgoing edge, has {outgoing}"
            ),
            Violation::ActionFanOut { node, outgoing } => {
                write!(f, "node `{node}` may have at most 1 outgoing edge, has {outgoing}")
            }
            Violation::MissingCondition { from, to } => {
                write!(f, "split edge {from} -> {to} is missing its condition key")
            }
            Violation::UnexpectedCondition { from, to } => {
                write!(f, "edge {from} -> {to} carries a condition its source ignores")
            }
            Violation::MisplacedDefault { from, to } => write!(
                f,
                "edge {from} -> {to} is marked default but its source is not an exclusive split"
            ),
            Violation::MultipleDefaults(n) => {
                write!(f, "exclusive split `{n}` declares more than one default edge")
            }
            Violation::GatewayMissingDirection(n) => {
                write!(f, "gateway `{n}` must declare a direction")
            }
            Violation::DirectionWithoutGateway(n) => {
                write!(f, "node `{n}` declares a direction but no gateway kind")
            }
            Violation::ActionOnGateway(n) => {
                write!(f, "node `{n}` cannot be both an action and a gateway")
            }
            Violation::UnpairedInclusive { node, reason } => {
                write!(f, "inclusive gateway `{node}` is not properly paired: {reason}")
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProcessError {
    #[error("malformed process document: {0}")]
    Syntax(String),
    #[error("invalid process definition: {}", render_violations(.0))]
    Invalid(Vec<Violation>),
}

fn render_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Branch correspondence between an inclusive split and its merge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InclusivePairing {
    pub merge: usize,
    /// split outgoing edge index -> merge incoming edge index
    pub branches: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
struct Topology {
    index: BTreeMap<String, usize>,
    outgoing: Vec<Vec<usize>>,
    incoming: Vec<Vec<usize>>,
    pairings: BTreeMap<usize, InclusivePairing>,
}

/// A validated, acyclic process graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessDefinition {
    id: String,
    start: String,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    topo: Topology,
}

impl ProcessDefinition {
    pub fn new(
        id: impl Into<String>,
        start: impl Into<String>,
        nodes: Vec<Node>,
        edges: Vec<Edge>,
    ) -> Result<Self, Vec<Violation>> {
        let id = id.into();
        let start = start.into();
        let topo = validate(&start, &nodes, &edges)?;
        Ok(ProcessDefinition {
            id,
            start,
            nodes,
            edges,
            topo,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn start(&self) -> usize {
        self.topo.index[&self.start]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    pub fn edge(&self, idx: usize) -> &Edge {
        &self.edges[idx]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.topo.index.get(id).copied()
    }

    pub fn outgoing(&self, node: usize) -> &[usize] {
        &self.topo.outgoing[node]
    }

    pub fn incoming(&self, node: usize) -> &[usize] {
        &self.topo.incoming[node]
    }

    pub fn edge_target(&self, edge: usize) -> usize {
        self.topo.index[&self.edges[edge].to]
    }

    pub fn pairing(&self, split: usize) -> Option<&InclusivePairing> {
        self.topo.pairings.get(&split)
    }

    pub fn end_nodes(&self) -> Vec<&str> {
        (0..self.nodes.len())
            .filter(|&i| self.topo.outgoing[i].is_empty())
            .map(|i| self.nodes[i].id.as_str())
            .collect()
    }

    /// Every action key referenced by the definition.
    pub fn action_keys(&self) -> BTreeSet<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Action(k) => Some(k.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Renders the definition as a `.process` document.
    pub fn to_document(&self) -> String {
        let doc = Document {
            id: self.id.clone(),
            start: self.start.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| {
                    let (action, gateway, direction) = match &n.kind {
                        NodeKind::Event => (None, None, None),
                        NodeKind::Action(k) => (Some(k.clone()), None, None),
                        NodeKind::Gateway { kind, direction } => (None, Some(*kind), Some(*direction)),
                    };
                    NodeDoc {
                        id: n.id.clone(),
                        action,
                        gateway,
                        direction,
                    }
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDoc {
                    from: e.from.clone(),
                    to: e.to.clone(),
                    condition: e.condition.clone(),
                    default: e.default,
                })
                .collect(),
        };
        toml::to_string(&doc).expect("process document is always serializable")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    id: String,
    start: String,
    #[serde(default)]
    nodes: Vec<NodeDoc>,
    #[serde(default)]
    edges: Vec<EdgeDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gateway: Option<GatewayKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    direction: Option<Direction>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    from: String,
    to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    condition: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    default: bool,
}

/// Parses and validates a `.process` document.
pub fn parse_process(document: &str) -> Result<ProcessDefinition, ProcessError> {
    let doc: Document = toml::from_str(document).map_err(|e| ProcessError::Syntax(e.message().to_owned()))?;

    let mut violations = Vec::new();
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for n in doc.nodes {
        let kind = match (n.action, n.gateway, n.direction) {
            (Some(_), Some(_), _) => {
                violations.push(Violation::ActionOnGateway(n.id.clone()));
                NodeKind::Event
            }
            (Some(key), None, None) => NodeKind::Action(key),
            (Some(_), None, Some(_)) | (None, None, Some(_)) => {
                violations.push(Violation::DirectionWithoutGateway(n.id.clone()));
                NodeKind::Event
            }
            (None, Some(kind), Some(direction)) => NodeKind::Gateway { kind, direction },
            (None, Some(_), None) => {
                violations.push(Violation::GatewayMissingDirection(n.id.clone()));
                NodeKind::Event
            }
            (None, None, None) => NodeKind::Event,
        };
        nodes.push(Node { id: n.id, kind });
    }
    let edges: Vec<Edge> = doc
        .edges
        .into_iter()
        .map(|e| Edge {
            from: e.from,
            to: e.to,
            condition: e.condition,
            default: e.default,
        })
        .collect();

    match ProcessDefinition::new(doc.id, doc.start, nodes, edges) {
        Ok(def) if violations.is_empty() => Ok(def),
        Ok(_) => Err(ProcessError::Invalid(violations)),
        Err(mut structural) => {
            violations.append(&mut structural);
            Err(ProcessError::Invalid(violations))
        }
    }
}

fn validate(start: &str, nodes: &[Node], edges: &[Edge]) -> Result<Topology, Vec<Violation>> {
    let mut violations = Vec::new();
    let mut index = BTreeMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if index.insert(n.id.clone(), i).is_some() {
            violations.push(Violation::DuplicateNode(n.id.clone()));
            index.insert(n.id.clone(), first_index(nodes, &n.id));
        }
    }
    if !index.contains_key(start) {
        violations.push(Violation::UnknownStart(start.to_owned()));
    }

    let mut outgoing = vec![Vec::new(); nodes.len()];
    let mut incoming = vec![Vec::new(); nodes.len()];
    let mut seen_pairs = BTreeSet::new();
    for (ei, e) in edges.iter().enumerate() {
        let (Some(&f), Some(&t)) = (index.get(&e.from), index.get(&e.to)) else {
            violations.push(Violation::DanglingEdge {
                from: e.from.clone(),
                to: e.to.clone(),
            });
            continue;
        };
        if !seen_pairs.insert((f, t)) {
            violations.push(Violation::DuplicateEdge {
                from: e.from.clone(),
                to: e.to.clone(),
            });
            continue;
        }
        outgoing[f].push(ei);
        incoming[t].push(ei);
    }

    for (i, n) in nodes.iter().enumerate() {
        let (outs, ins) = (outgoing[i].len(), incoming[i].len());
        match &n.kind {
            NodeKind::Event | NodeKind::Action(_) => {
                if outs > 1 {
                    violations.push(Violation::ActionFanOut {
                        node: n.id.clone(),
                        outgoing: outs,
                    });
                }
            }
            NodeKind::Gateway {
                direction: Direction::Split,
                ..
            } => {
                if outs < 2 {
                    violations.push(Violation::SplitFanOut {
                        node: n.id.clone(),
                        outgoing: outs,
                    });
                }
            }
            NodeKind::Gateway {
                direction: Direction::Merge,
                ..
            } => {
                if ins < 2 {
                    violations.push(Violation::MergeFanIn {
                        node: n.id.clone(),
                        incoming: ins,
                    });
                }
                if outs != 1 {
                    violations.push(Violation::MergeFanOut {
                        node: n.id.clone(),
                        outgoing: outs,
                    });
                }
            }
        }
    }

    check_conditions(nodes, edges, &outgoing, &mut violations);

    if let Some(&s) = index.get(start) {
        let mut reached = vec![false; nodes.len()];
        let mut queue = VecDeque::from([s]);
        reached[s] = true;
        while let Some(n) = queue.pop_front() {
            for &e in &outgoing[n] {
                let t = index[&edges[e].to];
                if !reached[t] {
                    reached[t] = true;
                    queue.push_back(t);
                }
            }
        }
        for (i, r) in reached.iter().enumerate() {
            if !r {
                violations.push(Violation::UnreachableNode(nodes[i].id.clone()));
            }
        }
    }

    let acyclic = match find_cycle(nodes, edges, &index, &outgoing) {
        Some(cycle) => {
            violations.push(Violation::Cycle(cycle));
            false
        }
        None => true,
    };

    let mut pairings = BTreeMap::new();
    if acyclic {
        pair_inclusive(
            nodes,
            edges,
            &index,
            &outgoing,
            &incoming,
            &mut pairings,
            &mut violations,
        );
    }

    if violations.is_empty() {
        Ok(Topology {
            index,
            outgoing,
            incoming,
            pairings,
        })
    } else {
        Err(violations)
    }
}

fn first_index(nodes: &[Node], id: &str) -> usize {
    nodes.iter().position(|n| n.id == id).unwrap_or(0)
}

fn check_conditions(nodes: &[Node], edges: &[Edge], outgoing: &[Vec<usize>], violations: &mut Vec<Violation>) {
    for (i, n) in nodes.iter().enumerate() {
        let split_kind = match n.kind {
            NodeKind::Gateway {
                kind,
                direction: Direction::Split,
            } => Some(kind),
            _ => None,
        };
        let mut defaults = 0;
        for &ei in &outgoing[i] {
            let e = &edges[ei];
            let pair = || (e.from.clone(), e.to.clone());
            if e.default {
                if split_kind == Some(GatewayKind::ExclusiveOr) {
                    defaults += 1;
                } else {
                    let (from, to) = pair();
                    violations.push(Violation::MisplacedDefault { from, to });
                }
            }
            match split_kind {
                Some(GatewayKind::ExclusiveOr) | Some(GatewayKind::InclusiveOr) => {
                    if e.condition.is_none() && !e.default {
                        let (from, to) = pair();
                        violations.push(Violation::MissingCondition { from, to });
                    }
                    if e.condition.is_some() && e.default {
                        let (from, to) = pair();
                        violations.push(Violation::UnexpectedCondition { from, to });
                    }
                }
                Some(GatewayKind::ParallelAnd) | None => {
                    if e.condition.is_some() {
                        let (from, to) = pair();
                        violations.push(Violation::UnexpectedCondition { from, to });
                    }
                }
            }
        }
        if defaults > 1 {
            violations.push(Violation::MultipleDefaults(n.id.clone()));
        }
    }
}

fn find_cycle(
    nodes: &[Node],
    edges: &[Edge],
    index: &BTreeMap<String, usize>,
    outgoing: &[Vec<usize>],
) -> Option<Vec<String>> {
    // Kahn's algorithm; anything left over sits on or behind a cycle.
    let mut indegree = vec![0usize; nodes.len()];
    for outs in outgoing {
        for &e in outs {
            indegree[index[&edges[e].to]] += 1;
        }
    }
    let mut queue: VecDeque<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut removed = 0;
    while let Some(n) = queue.pop_front() {
        removed += 1;
        for &e in &outgoing[n] {
            let t = index[&edges[e].to];
            indegree[t] -= 1;
            if indegree[t] == 0 {
                queue.push_back(t);
            }
        }
    }
    if removed == nodes.len() {
        None
    } else {
        Some(
            (0..nodes.len())
                .filter(|&i| indegree[i] > 0)
                .map(|i| nodes[i].id.clone())
                .collect(),
        )
    }
}

/// Every inclusive split must lead, through linear chains of action/event
/// nodes, into a single inclusive merge whose incoming edges are exactly those
/// branches; the merge synchronizes on the branches the split activated.
fn pair_inclusive(
    nodes: &[Node],
    edges: &[Edge],
    index: &BTreeMap<String, usize>,
    outgoing: &[Vec<usize>],
    incoming: &[Vec<usize>],
    pairings: &mut BTreeMap<usize, InclusivePairing>,
    violations: &mut Vec<Violation>,
) {
    let is_merge = |i: usize| {
        matches!(
            nodes[i].kind,
            NodeKind::Gateway {
                direction: Direction::Merge,
                ..
            }
        )
    };
    let mut merge_owner: BTreeMap<usize, usize> = BTreeMap::new();

    for (split, n) in nodes.iter().enumerate() {
        if !matches!(
            n.kind,
            NodeKind::Gateway {
                kind: GatewayKind::InclusiveOr,
                direction: Direction::Split
            }
        ) {
            continue;
        }
        let mut merge = None;
        let mut branches = BTreeMap::new();
        let mut problem = None;
        for &out in &outgoing[split] {
            let mut edge = out;
            let landed = loop {
                let target = index[&edges[edge].to];
                if is_merge(target) {
                    break Some(target);
                }
                match (&nodes[target].kind, outgoing[target].as_slice()) {
                    (NodeKind::Event | NodeKind::Action(_), [next]) => edge = *next,
                    _ => break None,
                }
            };
            match landed {
                None => {
                    problem = Some(format!(
                        "branch via `{}` does not reach a merge through a linear chain",
                        edges[out].to
                    ));
                    break;
                }
                Some(m) if merge.is_some_and(|prev| prev != m) => {
                    problem = Some("branches end in different merge gateways".to_owned());
                    break;
                }
                Some(m) => {
                    merge = Some(m);
                    branches.insert(out, edge);
                }
            }
        }
        if problem.is_none() {
            let Some(m) = merge else {
                // fan-out violation already reported
                continue;
            };
            let matches_kind = matches!(
                nodes[m].kind,
                NodeKind::Gateway {
                    kind: GatewayKind::InclusiveOr,
                    ..
                }
            );
            let reached: BTreeSet<usize> = branches.values().copied().collect();
            let declared: BTreeSet<usize> = incoming[m].iter().copied().collect();
            if !matches_kind {
                problem = Some(format!("branches join at non-inclusive merge `{}`", nodes[m].id));
            } else if reached != declared {
                problem = Some(format!(
                    "merge `{}` has incoming edges not originating from this split",
                    nodes[m].id
                ));
            } else if let Some(other) = merge_owner.insert(m, split) {
                problem = Some(format!(
                    "merge `{}` is already paired with `{}`",
                    nodes[m].id, nodes[other].id
                ));
            } else {
                pairings.insert(split, InclusivePairing { merge: m, branches });
            }
        }
        if let Some(reason) = problem {
            violations.push(Violation::UnpairedInclusive {
                node: n.id.clone(),
                reason,
            });
        }
    }

    for (m, n) in nodes.iter().enumerate() {
        if matches!(
            n.kind,
            NodeKind::Gateway {
                kind: GatewayKind::InclusiveOr,
                direction: Direction::Merge
            }
        ) && !merge_owner.contains_key(&m)
        {
            violations.push(Violation::UnpairedInclusive {
                node: n.id.clone(),
                reason: "no inclusive split leads here".to_owned(),
            });
        }
    }
}
