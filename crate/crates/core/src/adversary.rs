//! Adversarial events: strategies, trace generation, and the line-delimited
//! JSON trace codec.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use num_rational::Rational64;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::HealerState;
use crate::graph::NodeId;
use crate::ratio;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Insert { node: NodeId, neighbors: Vec<NodeId> },
    Delete { node: NodeId },
}

impl Event {
    pub fn node(&self) -> NodeId {
        match self {
            Event::Insert { node, .. } | Event::Delete { node } => *node,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    Uniform,
    DeleteOnly,
    TargetMaxDegree,
    TargetBridge,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Uniform => "uniform",
            StrategyKind::DeleteOnly => "delete-only",
            StrategyKind::TargetMaxDegree => "target-max-degree",
            StrategyKind::TargetBridge => "target-bridge",
        }
    }

    /// Adaptive strategies read live healer state and cannot be pre-generated.
    pub fn is_adaptive(self) -> bool {
        matches!(self, StrategyKind::TargetMaxDegree | StrategyKind::TargetBridge)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = AdversaryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(StrategyKind::Uniform),
            "delete-only" => Ok(StrategyKind::DeleteOnly),
            "target-max-degree" => Ok(StrategyKind::TargetMaxDegree),
            "target-bridge" => Ok(StrategyKind::TargetBridge),
            other => Err(AdversaryError::InvalidParams(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Strategy {
    pub kind: StrategyKind,
    /// Probability of an insertion; ignored by `delete-only`.
    pub insert_fraction: Rational64,
    /// Maximum number of neighbors of an inserted node.
    pub insert_degree: usize,
    /// Extra initial edges beyond the spanning tree, per initial node.
    pub extra_edges_per_node: Rational64,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Strategy {
            kind,
            insert_fraction: Rational64::new(2, 5),
            insert_degree: 4,
            extra_edges_per_node: Rational64::new(1, 2),
        }
    }

    pub fn with_insert_fraction(mut self, f: Rational64) -> Self {
        self.insert_fraction = f;
        self
    }

    pub fn with_insert_degree(mut self, d: usize) -> Self {
        self.insert_degree = d;
        self
    }

    pub fn validate(&self) -> Result<(), AdversaryError> {
        let zero = Rational64::from_integer(0);
        let one = Rational64::from_integer(1);
        if self.insert_fraction < zero || self.insert_fraction > one {
            return Err(AdversaryError::InvalidParams("insert_fraction must lie in [0,1]".into()));
        }
        if self.insert_degree == 0 {
            return Err(AdversaryError::InvalidParams("insert_degree must be positive".into()));
        }
        if self.extra_edges_per_node < zero {
            return Err(AdversaryError::InvalidParams("extra_edges_per_node must be non-negative".into()));
        }
        Ok(())
    }

    fn params(&self) -> TraceParams {
        TraceParams {
            insert_fraction: ratio::format(self.insert_fraction),
            insert_degree: self.insert_degree,
            extra_edges_per_node: ratio::format(self.extra_edges_per_node),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdversaryError {
    #[error("network is empty")]
    EmptyNetwork,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported trace version {0}")]
    VersionMismatch(u32),
}

fn chance<R: Rng + ?Sized>(p: Rational64, rng: &mut R) -> bool {
    if *p.numer() <= 0 {
        return false;
    }
    rng.random_range(0..*p.denom()) < *p.numer()
}

fn insert_event<R: Rng + ?Sized>(s: &Strategy, alive: &[NodeId], fresh: NodeId, rng: &mut R) -> Event {
    let k = s.insert_degree.min(alive.len());
    let mut neighbors: Vec<NodeId> = alive.choose_multiple(rng, k).copied().collect();
    neighbors.sort();
    Event::Insert { node: fresh, neighbors }
}

/// Next event for `s` against the current state. Uniform insertion happens
/// with probability `insert_fraction` (forced when the network is empty).
pub fn next_event<R: Rng + ?Sized>(s: &Strategy, view: &HealerState, rng: &mut R) -> Result<Event, AdversaryError> {
    let alive: Vec<NodeId> = view.graph().nodes().collect();
    let fresh = view.next_node_id();
    if s.kind == StrategyKind::DeleteOnly {
        return alive.choose(rng).map(|&node| Event::Delete { node }).ok_or(AdversaryError::EmptyNetwork);
    }
    if alive.is_empty() || chance(s.insert_fraction, rng) {
        return Ok(insert_event(s, &alive, fresh, rng));
    }
    let max_degree = || {
        let g = view.graph();
        alive.iter().copied().max_by_key(|&v| (g.degree(v), std::cmp::Reverse(v))).expect("non-empty")
    };
    let node = match s.kind {
        StrategyKind::Uniform => *alive.choose(rng).expect("non-empty"),
        StrategyKind::TargetMaxDegree => max_degree(),
        StrategyKind::TargetBridge => {
            let bridges: Vec<NodeId> = view.registry().duties().keys().copied().collect();
            match bridges.choose(rng) {
                Some(&v) => v,
                None => max_degree(),
            }
        }
        StrategyKind::DeleteOnly => unreachable!(),
    };
    Ok(Event::Delete { node })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceParams {
    pub insert_fraction: String,
    pub insert_degree: usize,
    pub extra_edges_per_node: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub v: u32,
    pub kappa: usize,
    pub seed: u64,
    pub strategy: String,
    pub params: TraceParams,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialGraph {
    pub nodes: Vec<NodeId>,
    pub edges: Vec<[NodeId; 2]>,
}

impl InitialGraph {
    pub fn edge_pairs(&self) -> Vec<(NodeId, NodeId)> {
        self.edges.iter().map(|e| (e[0], e[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub header: TraceHeader,
    pub initial: InitialGraph,
    pub events: Vec<Event>,
}

/// Seeded connected graph: a random recursive spanning tree over a shuffled
/// node order plus `⌊n·extra⌋` additional random edges (fewer if the graph
/// saturates).
pub fn initial_graph<R: Rng + ?Sized>(n0: usize, extra_per_node: Rational64, rng: &mut R) -> InitialGraph {
    use rand::seq::SliceRandom;
    let nodes: Vec<NodeId> = (0..n0 as u64).map(NodeId).collect();
    let mut order = nodes.clone();
    order.shuffle(rng);
    let mut edges: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
    for i in 1..order.len() {
        let j = rng.random_range(0..i);
        let (a, b) = (order[i], order[j]);
        edges.insert((a.min(b), a.max(b)));
    }
    let max_edges = n0 * n0.saturating_sub(1) / 2;
    let extra = (Rational64::from_integer(n0 as i64) * extra_per_node).floor().to_integer().max(0) as usize;
    let target = (edges.len() + extra).min(max_edges);
    while edges.len() < target {
        let a = NodeId(rng.random_range(0..n0 as u64));
        let b = NodeId(rng.random_range(0..n0 as u64));
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    InitialGraph { nodes, edges: edges.into_iter().map(|(a, b)| [a, b]).collect() }
}

/// Generates a reproducible trace for a non-adaptive strategy.
pub fn gen_trace(s: &Strategy, kappa: usize, n0: usize, steps: usize, seed: u64) -> Result<Trace, AdversaryError> {
    s.validate()?;
    if n0 == 0 {
        return Err(AdversaryError::InvalidParams("n0 must be at least 1".into()));
    }
    if s.kind.is_adaptive() {
        return Err(AdversaryError::InvalidParams(format!("strategy '{}' is adaptive and runs online only", s.kind)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = initial_graph(n0, s.extra_edges_per_node, &mut rng);
    let mut alive: Vec<NodeId> = initial.nodes.clone();
    let mut next = n0 as u64;
    let mut events = Vec::with_capacity(steps);
    for _ in 0..steps {
        let insert = match s.kind {
            StrategyKind::DeleteOnly => false,
            _ => alive.is_empty() || chance(s.insert_fraction, &mut rng),
        };
        if insert {
            let e = insert_event(s, &alive, NodeId(next), &mut rng);
            next += 1;
            alive.push(e.node());
            events.push(e);
        } else {
            if alive.is_empty() {
                return Err(AdversaryError::EmptyNetwork);
            }
            let i = rng.random_range(0..alive.len());
            events.push(Event::Delete { node: alive.swap_remove(i) });
        }
    }
    let header = TraceHeader { v: TRACE_VERSION, kappa, seed, strategy: s.kind.name().to_string(), params: s.params() };
    Ok(Trace { header, initial, events })
}

/// Header for traces recorded from an online run.
pub fn header_for(s: &Strategy, kappa: usize, seed: u64) -> TraceHeader {
    TraceHeader { v: TRACE_VERSION, kappa, seed, strategy: s.kind.name().to_string(), params: s.params() }
}

#[derive(Serialize, Deserialize)]
struct EventLine {
    t: u64,
    op: String,
    node: NodeId,
    #[serde(skip_serializing_if = "Option::is_none")]
    nbrs: Option<Vec<NodeId>>,
}

pub fn encode_trace(t: &Trace) -> String {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&t.header).expect("header serializes"));
    out.push('\n');
    out.push_str(&serde_json::to_string(&t.initial).expect("initial graph serializes"));
    out.push('\n');
    for (i, e) in t.events.iter().enumerate() {
        let line = match e {
            Event::Insert { node, neighbors } => {
                EventLine { t: i as u64 + 1, op: "ins".into(), node: *node, nbrs: Some(neighbors.clone()) }
            }
            Event::Delete { node } => EventLine { t: i as u64 + 1, op: "del".into(), node: *node, nbrs: None },
        };
        out.push_str(&serde_json::to_string(&line).expect("event serializes"));
        out.push('\n');
    }
    out
}

pub fn decode_trace(text: &str) -> Result<Trace, AdversaryError> {
    let parse_err = |line: usize, msg: String| AdversaryError::Parse { line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (ln, first) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| parse_err(ln, e.to_string()))?;
    if let Some(v) = raw.get("v").and_then(serde_json::Value::as_u64) {
        if v != TRACE_VERSION as u64 {
            return Err(AdversaryError::VersionMismatch(v as u32));
        }
    }
    let header: TraceHeader = serde_json::from_value(raw).map_err(|e| parse_err(ln, e.to_string()))?;
    let (ln, second) = lines.next().ok_or_else(|| parse_err(2, "missing initial graph".into()))?;
    let initial: InitialGraph = serde_json::from_str(second).map_err(|e| parse_err(ln, e.to_string()))?;
    let mut events = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventLine = serde_json::from_str(line).map_err(|e| parse_err(ln, e.to_string()))?;
        if rec.t != events.len() as u64 + 1 {
            return Err(parse_err(ln, format!("expected t={}, found t={}", events.len() + 1, rec.t)));
        }
        let e = match (rec.op.as_str(), rec.nbrs) {
            ("ins", Some(neighbors)) => Event::Insert { node: rec.node, neighbors },
            ("ins", None) => return Err(parse_err(ln, "insert without nbrs".into())),
            ("del", None) => Event::Delete { node: rec.node },
            ("del", Some(_)) => return Err(parse_err(ln, "delete with nbrs".into())),
            (op, _) => return Err(parse_err(ln, format!("unknown op '{op}'"))),
        };
        events.push(e);
    }
    Ok(Trace { header, initial, events })
}

impl Trace {
    /// Strategy described by the header.
    pub fn strategy(&self) -> Result<Strategy, AdversaryError> {
        let kind: StrategyKind = self.header.strategy.parse()?;
        let parse = |s: &str| ratio::parse(s).map_err(|e| AdversaryError::InvalidParams(e.to_string()));
        Ok(Strategy {
            kind,
            insert_fraction: parse(&self.header.params.insert_fraction)?,
            insert_degree: self.header.params.insert_degree,
            extra_edges_per_node: parse(&self.header.params.extra_edges_per_node)?,
        })
    }
}
