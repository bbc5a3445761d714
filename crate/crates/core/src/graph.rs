//! Colored live graph, deletion-free shadow graph, and the color-set edge
//! lifecycle used by every healing routine.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::Event;

/// Node identifier. Never reused within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Cloud identifier; each cloud owns exactly one color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CloudId(pub u64);

impl fmt::Display for CloudId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    /// Original or adversary-inserted edge.
    Black,
    Cloud(CloudId),
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Color::Black => f.write_str("B"),
            Color::Cloud(c) => write!(f, "C{}", c.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CloudKind {
    Primary,
    Secondary,
}

/// Unordered node pair, stored with the smaller id first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeKey(NodeId, NodeId);

impl EdgeKey {
    pub fn new(a: NodeId, b: NodeId) -> Self {
        if a <= b {
            EdgeKey(a, b)
        } else {
            EdgeKey(b, a)
        }
    }

    pub fn lo(&self) -> NodeId {
        self.0
    }

    pub fn hi(&self) -> NodeId {
        self.1
    }

    pub fn other(&self, v: NodeId) -> NodeId {
        if self.0 == v {
            self.1
        } else {
            self.0
        }
    }

    pub fn touches(&self, v: NodeId) -> bool {
        self.0 == v || self.1 == v
    }
}

impl fmt::Display for EdgeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.0, self.1)
    }
}

/// One live edge and its color set.
///
/// Cloud colors are stored together with the kind of cloud that uses the edge,
/// so the kind annotation can never cover a color the edge does not carry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeRecord {
    pub key: EdgeKey,
    black: bool,
    clouds: BTreeMap<CloudId, CloudKind>,
    marked: bool,
}

impl EdgeRecord {
    fn new(key: EdgeKey) -> Self {
        EdgeRecord { key, black: false, clouds: BTreeMap::new(), marked: false }
    }

    /// Builds a record from its parts; used when restoring snapshots.
    pub fn from_parts(key: EdgeKey, black: bool, clouds: BTreeMap<CloudId, CloudKind>) -> Self {
        EdgeRecord { key, black, clouds, marked: false }
    }

    pub fn is_black(&self) -> bool {
        self.black
    }

    pub fn is_marked(&self) -> bool {
        self.marked
    }

    pub fn is_colorless(&self) -> bool {
        !self.black && self.clouds.is_empty()
    }

    /// True when the color set is exactly `{Black}`.
    pub fn is_only_black(&self) -> bool {
        self.black && self.clouds.is_empty()
    }

    pub fn has_color(&self, c: Color) -> bool {
        match c {
            Color::Black => self.black,
            Color::Cloud(id) => self.clouds.contains_key(&id),
        }
    }

    pub fn colors(&self) -> impl Iterator<Item = Color> + '_ {
        self.black.then_some(Color::Black).into_iter().chain(self.clouds.keys().map(|&c| Color::Cloud(c)))
    }

    /// Cloud colors with the kind of cloud each one belongs to.
    pub fn kinds(&self) -> &BTreeMap<CloudId, CloudKind> {
        &self.clouds
    }

    pub fn kind_of(&self, cloud: CloudId) -> Option<CloudKind> {
        self.clouds.get(&cloud).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("node {0} already present")]
    DuplicateNode(NodeId),
    #[error("node {0} not present")]
    UnknownNode(NodeId),
    #[error("self-loop on node {0}")]
    SelfLoop(NodeId),
    #[error("no edge {0}")]
    UnknownEdge(EdgeKey),
    #[error("edge {0} already present")]
    DuplicateEdge(EdgeKey),
    #[error("edge {0} does not carry color {1}")]
    ColorAbsent(EdgeKey, Color),
    #[error("edge {0} is not marked")]
    NotMarked(EdgeKey),
    #[error("black is not a cloud color")]
    BlackNotAllowed,
    #[error("repair phase left edge {0} marked or colorless")]
    DirtyPhase(EdgeKey),
    #[error("density of an empty subset is undefined")]
    EmptySubset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeUse {
    Reused,
    Created,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StripOutcome {
    NowEmpty,
    StillColored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PurgeOutcome {
    Deleted,
    Kept,
}

/// Read-only view used by density, connectivity and distance metrics.
pub trait GraphView {
    fn node_ids(&self) -> Vec<NodeId>;
    fn has_node(&self, v: NodeId) -> bool;
    fn neighbors_of(&self, v: NodeId) -> Box<dyn Iterator<Item = NodeId> + '_>;
    fn adjacent(&self, u: NodeId, v: NodeId) -> bool;

    fn degree_of(&self, v: NodeId) -> usize {
        self.neighbors_of(v).count()
    }
}

/// The live network, with colored edges.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ColoredGraph {
    nodes: BTreeSet<NodeId>,
    adjacency: BTreeMap<NodeId, BTreeSet<NodeId>>,
    edges: BTreeMap<EdgeKey, EdgeRecord>,
    in_repair: bool,
}

impl ColoredGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn contains(&self, v: NodeId) -> bool {
        self.nodes.contains(&v)
    }

    pub fn neighbors(&self, v: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.adjacency.get(&v).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency.get(&v).map_or(0, BTreeSet::len)
    }

    pub fn edge(&self, u: NodeId, v: NodeId) -> Option<&EdgeRecord> {
        self.edges.get(&EdgeKey::new(u, v))
    }

    pub fn edges(&self) -> impl Iterator<Item = &EdgeRecord> {
        self.edges.values()
    }

    pub fn in_repair(&self) -> bool {
        self.in_repair
    }

    pub fn add_node(&mut self, v: NodeId) -> Result<(), GraphError> {
        if !self.nodes.insert(v) {
            return Err(GraphError::DuplicateNode(v));
        }
        self.adjacency.insert(v, BTreeSet::new());
        Ok(())
    }

    /// Removes `v` and returns its incident edges with their full color sets.
    pub fn remove_node(&mut self, v: NodeId) -> Result<Vec<EdgeRecord>, GraphError> {
        if !self.nodes.remove(&v) {
            return Err(GraphError::UnknownNode(v));
        }
        let nbrs = self.adjacency.remove(&v).unwrap_or_default();
        let mut removed = Vec::with_capacity(nbrs.len());
        for u in nbrs {
            if let Some(adj) = self.adjacency.get_mut(&u) {
                adj.remove(&v);
            }
            if let Some(rec) = self.edges.remove(&EdgeKey::new(u, v)) {
                removed.push(rec);
            }
        }
        Ok(removed)
    }

    fn check_pair(&self, u: NodeId, v: NodeId) -> Result<EdgeKey, GraphError> {
        if u == v {
            return Err(GraphError::SelfLoop(u));
        }
        for x in [u, v] {
            if !self.nodes.contains(&x) {
                return Err(GraphError::UnknownNode(x));
            }
        }
        Ok(EdgeKey::new(u, v))
    }

    fn link(&mut self, key: EdgeKey) -> &mut EdgeRecord {
        self.adjacency.entry(key.lo()).or_default().insert(key.hi());
        self.adjacency.entry(key.hi()).or_default().insert(key.lo());
        self.edges.entry(key).or_insert_with(|| EdgeRecord::new(key))
    }

    /// Adds an adversary edge colored `{Black}`. The pair must not be linked yet.
    pub fn add_black_edge(&mut self, u: NodeId, v: NodeId) -> Result<(), GraphError> {
        let key = self.check_pair(u, v)?;
        if self.edges.contains_key(&key) {
            return Err(GraphError::DuplicateEdge(key));
        }
        self.link(key).black = true;
        Ok(())
    }

    /// Adds cloud color `c` with kind `kind` to the edge `(u,v)`, creating the
    /// edge if needed.
    pub fn ensure_edge_color(
        &mut self,
        u: NodeId,
        v: NodeId,
        c: Color,
        kind: CloudKind,
    ) -> Result<EdgeUse, GraphError> {
        let Color::Cloud(cloud) = c else {
            return Err(GraphError::BlackNotAllowed);
        };
        let key = self.check_pair(u, v)?;
        let existed = self.edges.contains_key(&key);
        self.link(key).clouds.insert(cloud, kind);
        Ok(if existed { EdgeUse::Reused } else { EdgeUse::Created })
    }

    /// Removes color `c` from edge `(u,v)`; marks the edge when it becomes colorless.
    pub fn strip_color(&mut self, u: NodeId, v: NodeId, c: Color) -> Result<StripOutcome, GraphError> {
        let key = EdgeKey::new(u, v);
        let rec = self.edges.get_mut(&key).ok_or(GraphError::UnknownEdge(key))?;
        let present = match c {
            Color::Black => std::mem::replace(&mut rec.black, false),
            Color::Cloud(id) => rec.clouds.remove(&id).is_some(),
        };
        if !present {
            return Err(GraphError::ColorAbsent(key, c));
        }
        if rec.is_colorless() {
            rec.marked = true;
            Ok(StripOutcome::NowEmpty)
        } else {
            Ok(StripOutcome::StillColored)
        }
    }

    /// Deletes a marked edge if it is still colorless, otherwise unmarks it.
    pub fn purge_if_colorless(&mut self, u: NodeId, v: NodeId) -> Result<PurgeOutcome, GraphError> {
        let key = EdgeKey::new(u, v);
        let rec = self.edges.get_mut(&key).ok_or(GraphError::UnknownEdge(key))?;
        if !rec.marked {
            return Err(GraphError::NotMarked(key));
        }
        if rec.is_colorless() {
            self.unlink(key);
            Ok(PurgeOutcome::Deleted)
        } else {
            rec.marked = false;
            Ok(PurgeOutcome::Kept)
        }
    }

    /// Removes an edge outright regardless of colors. Only fault injection uses this.
    pub fn remove_edge(&mut self, u: NodeId, v: NodeId) -> Result<EdgeRecord, GraphError> {
        let key = EdgeKey::new(u, v);
        if !self.edges.contains_key(&key) {
            return Err(GraphError::UnknownEdge(key));
        }
        Ok(self.unlink(key))
    }

    fn unlink(&mut self, key: EdgeKey) -> EdgeRecord {
        if let Some(adj) = self.adjacency.get_mut(&key.lo()) {
            adj.remove(&key.hi());
        }
        if let Some(adj) = self.adjacency.get_mut(&key.hi()) {
            adj.remove(&key.lo());
        }
        self.edges.remove(&key).expect("edge present")
    }

    pub(crate) fn insert_record(&mut self, rec: EdgeRecord) -> Result<(), GraphError> {
        let key = self.check_pair(rec.key.lo(), rec.key.hi())?;
        if self.edges.contains_key(&key) {
            return Err(GraphError::DuplicateEdge(key));
        }
        *self.link(key) = rec;
        Ok(())
    }

    pub fn begin_repair(&mut self) {
        self.in_repair = true;
    }

    /// Closes a repair phase; fails if any edge is still marked or colorless.
    pub fn end_repair(&mut self) -> Result<(), GraphError> {
        self.in_repair = false;
        self.check_clean()
    }

    /// Phase-boundary invariant: no marked and no colorless edges.
    pub fn check_clean(&self) -> Result<(), GraphError> {
        match self.edges.values().find(|e| e.marked || e.is_colorless()) {
            Some(e) => Err(GraphError::DirtyPhase(e.key)),
            None => Ok(()),
        }
    }
}

impl GraphView for ColoredGraph {
    fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().copied().collect()
    }

    fn has_node(&self, v: NodeId) -> bool {
        self.nodes.contains(&v)
    }

    fn neighbors_of(&self, v: NodeId) -> Box<dyn Iterator<Item = NodeId> + '_> {
        Box::new(self.neighbors(v))
    }

    fn adjacent(&self, u: NodeId, v: NodeId) -> bool {
        self.adjacency.get(&u).is_some_and(|s| s.contains(&v))
    }

    fn degree_of(&self, v: NodeId) -> usize {
        self.degree(v)
    }
}

/// Every node and black edge ever present. Nothing is ever removed; deletion
/// only clears the alive flag.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShadowGraph {
    adjacency: BTreeMap<NodeId, BTreeSet<NodeId>>,
    alive: BTreeSet<NodeId>,
    edge_count: usize,
}

impl ShadowGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn alive(&self) -> &BTreeSet<NodeId> {
        &self.alive
    }

    pub fn is_alive(&self, v: NodeId) -> bool {
        self.alive.contains(&v)
    }

    pub fn contains(&self, v: NodeId) -> bool {
        self.adjacency.contains_key(&v)
    }

    pub fn neighbors(&self, v: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.adjacency.get(&v).into_iter().flat_map(|s| s.iter().copied())
    }

    /// Degree in the shadow, counting edges to deleted nodes.
    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency.get(&v).map_or(0, BTreeSet::len)
    }

    /// Shadow neighbors of `v` that have been deleted.
    pub fn dead_degree(&self, v: NodeId) -> usize {
        self.neighbors(v).filter(|u| !self.alive.contains(u)).count()
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.adjacency.get(&u).is_some_and(|s| s.contains(&v))
    }

    /// All shadow edges, each reported once.
    pub fn edges(&self) -> impl Iterator<Item = EdgeKey> + '_ {
        self.adjacency.iter().flat_map(|(&u, s)| s.iter().filter(move |&&v| u < v).map(move |&v| EdgeKey::new(u, v)))
    }

    pub fn next_node_id(&self) -> NodeId {
        NodeId(self.adjacency.keys().next_back().map_or(0, |v| v.0 + 1))
    }

    /// Adds a node, alive, with black edges to `nbrs` (which must be alive).
    pub fn insert(&mut self, v: NodeId, nbrs: &[NodeId]) -> Result<(), GraphError> {
        if self.adjacency.contains_key(&v) {
            return Err(GraphError::DuplicateNode(v));
        }
        let uniq: BTreeSet<NodeId> = nbrs.iter().copied().collect();
        for &u in &uniq {
            if u == v {
                return Err(GraphError::SelfLoop(v));
            }
            if !self.alive.contains(&u) {
                return Err(GraphError::UnknownNode(u));
            }
        }
        for &u in &uniq {
            self.adjacency.get_mut(&u).expect("alive node").insert(v);
        }
        self.edge_count += uniq.len();
        self.adjacency.insert(v, uniq);
        self.alive.insert(v);
        Ok(())
    }

    /// Adds an edge between two existing shadow nodes; used only while
    /// loading the initial graph.
    pub(crate) fn add_initial_edge(&mut self, u: NodeId, v: NodeId) -> Result<(), GraphError> {
        if u == v {
            return Err(GraphError::SelfLoop(u));
        }
        for x in [u, v] {
            if !self.adjacency.contains_key(&x) {
                return Err(GraphError::UnknownNode(x));
            }
        }
        if self.adjacency.get_mut(&u).expect("present").insert(v) {
            self.adjacency.get_mut(&v).expect("present").insert(u);
            self.edge_count += 1;
        }
        Ok(())
    }

    pub fn delete(&mut self, v: NodeId) -> Result<(), GraphError> {
        if !self.alive.remove(&v) {
            return Err(GraphError::UnknownNode(v));
        }
        Ok(())
    }

    pub fn apply(&mut self, e: &Event) -> Result<(), GraphError> {
        match e {
            Event::Insert { node, neighbors } => self.insert(*node, neighbors),
            Event::Delete { node } => self.delete(*node),
        }
    }

    pub(crate) fn restore(adjacency: BTreeMap<NodeId, BTreeSet<NodeId>>, alive: BTreeSet<NodeId>) -> Self {
        let edge_count = adjacency.values().map(BTreeSet::len).sum::<usize>() / 2;
        ShadowGraph { adjacency, alive, edge_count }
    }
}

impl GraphView for ShadowGraph {
    fn node_ids(&self) -> Vec<NodeId> {
        self.adjacency.keys().copied().collect()
    }

    fn has_node(&self, v: NodeId) -> bool {
        self.adjacency.contains_key(&v)
    }

    fn neighbors_of(&self, v: NodeId) -> Box<dyn Iterator<Item = NodeId> + '_> {
        Box::new(self.neighbors(v))
    }

    fn adjacent(&self, u: NodeId, v: NodeId) -> bool {
        self.has_edge(u, v)
    }

    fn degree_of(&self, v: NodeId) -> usize {
        self.degree(v)
    }
}

/// Other endpoints of the removed records that carry Black.
pub fn black_neighbors(v: NodeId, removed: &[EdgeRecord]) -> BTreeSet<NodeId> {
    removed.iter().filter(|r| r.is_black()).map(|r| r.key.other(v)).collect()
}

/// Number of edges of `g` with both endpoints in `set`.
pub fn induced_edge_count<G: GraphView + ?Sized>(g: &G, set: &BTreeSet<NodeId>) -> usize {
    let twice: usize = set.iter().map(|&x| g.neighbors_of(x).filter(|u| set.contains(u)).count()).sum();
    twice / 2
}

/// `|E(S)| / |S|` as an exact rational. Colors are ignored.
pub fn density<G: GraphView + ?Sized>(g: &G, set: &BTreeSet<NodeId>) -> Result<Rational64, GraphError> {
    if set.is_empty() {
        return Err(GraphError::EmptySubset);
    }
    if let Some(&v) = set.iter().find(|&&v| !g.has_node(v)) {
        return Err(GraphError::UnknownNode(v));
    }
    Ok(Rational64::new(induced_edge_count(g, set) as i64, set.len() as i64))
}

/// Nodes reachable from `start` in `g`.
pub fn component_of<G: GraphView + ?Sized>(g: &G, start: NodeId) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(x) = queue.pop_front() {
        for u in g.neighbors_of(x) {
            if seen.insert(u) {
                queue.push_back(u);
            }
        }
    }
    seen
}

pub fn is_connected<G: GraphView + ?Sized>(g: &G) -> bool {
    let nodes = g.node_ids();
    match nodes.first() {
        None => true,
        Some(&s) => component_of(g, s).len() == nodes.len(),
    }
}

/// Unweighted shortest-path distances from `source`.
pub fn bfs_distances<G: GraphView + ?Sized>(g: &G, source: NodeId) -> BTreeMap<NodeId, u64> {
    let mut dist = BTreeMap::from([(source, 0u64)]);
    let mut queue = VecDeque::from([source]);
    while let Some(x) = queue.pop_front() {
        let d = dist[&x];
        for u in g.neighbors_of(x) {
            if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(u) {
                e.insert(d + 1);
                queue.push_back(u);
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u64) -> NodeId {
        NodeId(i)
    }

    fn graph_with(nodes: &[u64], black: &[(u64, u64)]) -> ColoredGraph {
        let mut g = ColoredGraph::new();
        for &v in nodes {
            g.add_node(n(v)).unwrap();
        }
        for &(a, b) in black {
            g.add_black_edge(n(a), n(b)).unwrap();
        }
        g
    }

    fn set(ids: &[u64]) -> BTreeSet<NodeId> {
        ids.iter().map(|&i| n(i)).collect()
    }

    #[test]
    fn add_node_cases() {
        let mut g = ColoredGraph::new();
        g.add_node(n(0)).unwrap();
        assert_eq!(g.node_count(), 1);
        g.add_node(n(1)).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.add_node(n(0)), Err(GraphError::DuplicateNode(n(0))));
    }

    #[test]
    fn remove_node_returns_records() {
        let mut g = graph_with(&[0, 1, 2, 3], &[(0, 1), (0, 2), (0, 3)]);
        let removed = g.remove_node(n(0)).unwrap();
        assert_eq!(removed.len(), 3);
        assert!(removed.iter().all(EdgeRecord::is_only_black));
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.degree(n(1)), 0);

        let mut g = graph_with(&[0, 1], &[(0, 1)]);
        g.ensure_edge_color(n(0), n(1), Color::Cloud(CloudId(1)), CloudKind::Primary).unwrap();
        let removed = g.remove_node(n(1)).unwrap();
        assert_eq!(removed[0].colors().collect::<Vec<_>>(), vec![Color::Black, Color::Cloud(CloudId(1))]);

        let mut g = graph_with(&[5], &[]);
        assert!(g.remove_node(n(5)).unwrap().is_empty());
        assert_eq!(g.remove_node(n(5)), Err(GraphError::UnknownNode(n(5))));
    }

    #[test]
    fn ensure_edge_color_reuses_or_creates() {
        let c7 = Color::Cloud(CloudId(7));
        let mut g = graph_with(&[0, 1, 2], &[(0, 1)]);
        assert_eq!(g.ensure_edge_color(n(0), n(1), c7, CloudKind::Primary), Ok(EdgeUse::Reused));
        let e = g.edge(n(0), n(1)).unwrap();
        assert_eq!(e.colors().collect::<Vec<_>>(), vec![Color::Black, c7]);
        assert_eq!(e.kind_of(CloudId(7)), Some(CloudKind::Primary));

        assert_eq!(g.ensure_edge_color(n(1), n(2), c7, CloudKind::Secondary), Ok(EdgeUse::Created));
        assert_eq!(g.edge(n(1), n(2)).unwrap().colors().collect::<Vec<_>>(), vec![c7]);

        assert_eq!(g.ensure_edge_color(n(1), n(1), c7, CloudKind::Primary), Err(GraphError::SelfLoop(n(1))));
        assert_eq!(g.ensure_edge_color(n(1), n(9), c7, CloudKind::Primary), Err(GraphError::UnknownNode(n(9))));
        assert_eq!(g.ensure_edge_color(n(1), n(2), Color::Black, CloudKind::Primary), Err(GraphError::BlackNotAllowed));
    }

    #[test]
    fn strip_color_cases() {
        let c3 = Color::Cloud(CloudId(3));
        let c5 = Color::Cloud(CloudId(5));
        let mut g = graph_with(&[0, 1, 2, 3], &[(0, 1)]);
        g.ensure_edge_color(n(0), n(1), c3, CloudKind::Primary).unwrap();
        assert_eq!(g.strip_color(n(0), n(1), c3), Ok(StripOutcome::StillColored));
        assert!(g.edge(n(0), n(1)).unwrap().is_only_black());

        g.ensure_edge_color(n(1), n(2), c3, CloudKind::Primary).unwrap();
        assert_eq!(g.strip_color(n(1), n(2), c3), Ok(StripOutcome::NowEmpty));
        assert!(g.edge(n(1), n(2)).unwrap().is_marked());

        g.ensure_edge_color(n(2), n(3), c3, CloudKind::Primary).unwrap();
        g.ensure_edge_color(n(2), n(3), c5, CloudKind::Secondary).unwrap();
        assert_eq!(g.strip_color(n(2), n(3), c3), Ok(StripOutcome::StillColored));
        assert_eq!(g.edge(n(2), n(3)).unwrap().colors().collect::<Vec<_>>(), vec![c5]);
        assert!(g.edge(n(2), n(3)).unwrap().kind_of(CloudId(3)).is_none());

        assert!(matches!(g.strip_color(n(2), n(3), c3), Err(GraphError::ColorAbsent(..))));
        assert!(matches!(g.strip_color(n(0), n(3), c3), Err(GraphError::UnknownEdge(..))));
    }

    #[test]
    fn purge_cases() {
        let c9 = Color::Cloud(CloudId(9));
        let mut g = graph_with(&[0, 1, 2], &[]);
        g.begin_repair();
        g.ensure_edge_color(n(0), n(1), c9, CloudKind::Primary).unwrap();
        g.strip_color(n(0), n(1), c9).unwrap();
        assert_eq!(g.purge_if_colorless(n(0), n(1)), Ok(PurgeOutcome::Deleted));
        assert!(g.edge(n(0), n(1)).is_none());
        assert_eq!(g.degree(n(0)), 0);

        g.ensure_edge_color(n(1), n(2), c9, CloudKind::Primary).unwrap();
        g.strip_color(n(1), n(2), c9).unwrap();
        g.ensure_edge_color(n(1), n(2), c9, CloudKind::Primary).unwrap();
        assert_eq!(g.purge_if_colorless(n(1), n(2)), Ok(PurgeOutcome::Kept));
        assert!(!g.edge(n(1), n(2)).unwrap().is_marked());
        assert_eq!(g.purge_if_colorless(n(1), n(2)), Err(GraphError::NotMarked(EdgeKey::new(n(1), n(2)))));
        assert!(g.end_repair().is_ok());
    }

    #[test]
    fn end_repair_rejects_leftover_marks() {
        let c1 = Color::Cloud(CloudId(1));
        let mut g = graph_with(&[0, 1], &[]);
        g.begin_repair();
        g.ensure_edge_color(n(0), n(1), c1, CloudKind::Primary).unwrap();
        g.strip_color(n(0), n(1), c1).unwrap();
        assert!(g.in_repair());
        assert!(matches!(g.end_repair(), Err(GraphError::DirtyPhase(_))));
    }

    #[test]
    fn black_neighbor_selection() {
        let mut g = graph_with(&[0, 1, 2, 3], &[(0, 1), (0, 2), (0, 3)]);
        let removed = g.remove_node(n(0)).unwrap();
        assert_eq!(black_neighbors(n(0), &removed), set(&[1, 2, 3]));

        let c1 = Color::Cloud(CloudId(1));
        let mut g = graph_with(&[0, 1, 2], &[(0, 1)]);
        g.ensure_edge_color(n(0), n(1), c1, CloudKind::Primary).unwrap();
        g.ensure_edge_color(n(0), n(2), c1, CloudKind::Primary).unwrap();
        let removed = g.remove_node(n(0)).unwrap();
        assert_eq!(black_neighbors(n(0), &removed), set(&[1]));
        assert!(black_neighbors(n(0), &[]).is_empty());
    }

    #[test]
    fn density_small_cases() {
        let tri = graph_with(&[0, 1, 2], &[(0, 1), (1, 2), (0, 2)]);
        assert_eq!(density(&tri, &set(&[0, 1, 2])).unwrap(), Rational64::from_integer(1));
        let path = graph_with(&[0, 1, 2], &[(0, 1), (1, 2)]);
        assert_eq!(density(&path, &set(&[0, 1, 2])).unwrap(), Rational64::new(2, 3));
        let mut k5 = Vec::new();
        for a in 0..5 {
            for b in a + 1..5 {
                k5.push((a, b));
            }
        }
        let k5 = graph_with(&[0, 1, 2, 3, 4], &k5);
        assert_eq!(density(&k5, &set(&[0, 1, 2, 3, 4])).unwrap(), Rational64::from_integer(2));
        assert_eq!(density(&k5, &BTreeSet::new()), Err(GraphError::EmptySubset));
    }

    #[test]
    fn connectivity_small_cases() {
        assert!(is_connected(&graph_with(&[0], &[])));
        assert!(is_connected(&ColoredGraph::new()));
        assert!(!is_connected(&graph_with(&[0, 1], &[])));
        let c6 = graph_with(&[0, 1, 2, 3, 4, 5], &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]);
        assert!(is_connected(&c6));
    }

    #[test]
    fn shadow_insert_and_delete() {
        let mut sh = ShadowGraph::new();
        for v in 0..3 {
            sh.insert(n(v), &[]).unwrap();
        }
        sh.apply(&Event::Insert { node: n(3), neighbors: vec![n(0), n(1)] }).unwrap();
        assert_eq!(sh.edge_count(), 2);
        sh.apply(&Event::Delete { node: n(3) }).unwrap();
        assert_eq!(sh.edge_count(), 2);
        assert!(sh.contains(n(3)));
        assert!(!sh.is_alive(n(3)));
        assert_eq!(sh.dead_degree(n(0)), 1);
        assert_eq!(sh.apply(&Event::Delete { node: n(3) }), Err(GraphError::UnknownNode(n(3))));
        assert_eq!(sh.insert(n(3), &[]), Err(GraphError::DuplicateNode(n(3))));
        assert_eq!(sh.insert(n(4), &[n(3)]), Err(GraphError::UnknownNode(n(3))));
        assert_eq!(sh.next_node_id(), n(4));
    }
}
