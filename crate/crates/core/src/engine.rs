//! The healing state machine.
//!
//! A deletion is repaired in one sequential phase. Cloud colors are stripped
//! from the edges of every cloud being rebuilt (marking those left colorless),
//! the new topology is laid down reusing existing edges where it can, and
//! only then are edges that are still marked and colorless removed. Black
//! edges never lose their color, so they are never removed.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::Event;
use crate::expander::{self, CloudTopology, ExpanderConfig, ExpanderError};
use crate::graph::{
    black_neighbors, CloudId, CloudKind, Color, ColoredGraph, EdgeKey, EdgeRecord, EdgeUse, GraphError, NodeId,
    PurgeOutcome, ShadowGraph,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Expander(#[from] ExpanderError),
}

/// Deliberate defects used to check that the verification suite notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Deletions remove the node and do nothing else.
    SkipHeal,
    /// After the first event, one black edge between alive nodes is removed.
    DropBlackEdge,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "skip-heal" => Ok(Fault::SkipHeal),
            "drop-black-edge" => Ok(Fault::DropBlackEdge),
            other => Err(format!("unknown fault '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub expander: ExpanderConfig,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl EngineConfig {
    pub fn new(expander: ExpanderConfig, seed: u64) -> Self {
        EngineConfig { expander, seed, fault: None }
    }
}

/// Work done by the healer; a proxy for recovery time and message cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairCounters {
    pub inserts: u64,
    pub deletes: u64,
    pub branch_all_black: u64,
    pub branch_primary: u64,
    pub branch_secondary: u64,
    pub edges_created: u64,
    pub edges_reused: u64,
    pub edges_deleted: u64,
    pub clouds_created: u64,
    pub clouds_rebuilt: u64,
    pub secondaries_created: u64,
    pub merges: u64,
    pub clouds_merged: u64,
    pub free_local: u64,
    pub free_borrowed: u64,
    pub free_null: u64,
    pub uncertified_builds: u64,
    pub faults_injected: u64,
}

macro_rules! counter_fields {
    ($mac:ident) => {
        $mac!(
            inserts,
            deletes,
            branch_all_black,
            branch_primary,
            branch_secondary,
            edges_created,
            edges_reused,
            edges_deleted,
            clouds_created,
            clouds_rebuilt,
            secondaries_created,
            merges,
            clouds_merged,
            free_local,
            free_borrowed,
            free_null,
            uncertified_builds,
            faults_injected
        )
    };
}

impl RepairCounters {
    pub fn add(&mut self, other: &RepairCounters) {
        macro_rules! sum {
            ($($f:ident),*) => { $( self.$f += other.$f; )* };
        }
        counter_fields!(sum);
    }

    pub fn names() -> Vec<&'static str> {
        macro_rules! names {
            ($($f:ident),*) => { vec![$( stringify!($f) ),*] };
        }
        counter_fields!(names)
    }

    pub fn values(&self) -> Vec<u64> {
        macro_rules! values {
            ($($f:ident),*) => { vec![$( self.$f ),*] };
        }
        counter_fields!(values)
    }

    pub fn from_values(values: &[u64]) -> Option<Self> {
        let mut c = RepairCounters::default();
        let mut it = values.iter().copied();
        macro_rules! fill {
            ($($f:ident),*) => { $( c.$f = it.next()?; )* };
        }
        counter_fields!(fill);
        it.next().is_none().then_some(c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cloud {
    pub id: CloudId,
    pub kind: CloudKind,
    pub members: BTreeSet<NodeId>,
    pub topology: CloudTopology,
}

impl Cloud {
    pub fn color(&self) -> Color {
        Color::Cloud(self.id)
    }
}

/// Clouds plus the bookkeeping that ties them to nodes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CloudRegistry {
    clouds: BTreeMap<CloudId, Cloud>,
    memberships: BTreeMap<NodeId, BTreeSet<CloudId>>,
    /// (secondary cloud, cloud it links) → node serving as the link.
    bridges: BTreeMap<(CloudId, CloudId), NodeId>,
    secondary_duty: BTreeMap<NodeId, CloudId>,
}

impl CloudRegistry {
    pub fn get(&self, id: CloudId) -> Option<&Cloud> {
        self.clouds.get(&id)
    }

    pub fn contains(&self, id: CloudId) -> bool {
        self.clouds.contains_key(&id)
    }

    pub fn clouds(&self) -> impl Iterator<Item = &Cloud> {
        self.clouds.values()
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn clouds_of(&self, v: NodeId) -> impl Iterator<Item = CloudId> + '_ {
        self.memberships.get(&v).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn membership_count(&self, v: NodeId) -> usize {
        self.memberships.get(&v).map_or(0, BTreeSet::len)
    }

    pub fn bridges(&self) -> &BTreeMap<(CloudId, CloudId), NodeId> {
        &self.bridges
    }

    pub fn duty(&self, v: NodeId) -> Option<CloudId> {
        self.secondary_duty.get(&v).copied()
    }

    pub fn duties(&self) -> &BTreeMap<NodeId, CloudId> {
        &self.secondary_duty
    }

    /// Clouds linked by secondary cloud `sec`, with their link nodes.
    pub fn bridged_by(&self, sec: CloudId) -> Vec<(CloudId, NodeId)> {
        self.bridges.range((sec, CloudId(0))..=(sec, CloudId(u64::MAX))).map(|(&(_, c), &x)| (c, x)).collect()
    }

    fn kind_of(&self, id: CloudId) -> Option<CloudKind> {
        self.clouds.get(&id).map(|c| c.kind)
    }

    /// Registers or replaces a cloud, keeping memberships in step.
    fn install(&mut self, cloud: Cloud) {
        if let Some(old) = self.clouds.get(&cloud.id) {
            let gone: Vec<NodeId> = old.members.difference(&cloud.members).copied().collect();
            for m in gone {
                self.leave(m, cloud.id);
            }
        }
        for &m in &cloud.members {
            self.memberships.entry(m).or_default().insert(cloud.id);
        }
        self.clouds.insert(cloud.id, cloud);
    }

    fn leave(&mut self, v: NodeId, id: CloudId) {
        if let Some(set) = self.memberships.get_mut(&v) {
            set.remove(&id);
            if set.is_empty() {
                self.memberships.remove(&v);
            }
        }
    }

    fn assign_duty(&mut self, v: NodeId, sec: CloudId) {
        self.secondary_duty.entry(v).or_insert(sec);
    }

    /// Re-derives the duty of `v` from its current secondary memberships.
    fn refresh_duty(&mut self, v: NodeId) {
        if let Some(&d) = self.secondary_duty.get(&v) {
            if self.clouds.get(&d).is_some_and(|c| c.members.contains(&v)) {
                return;
            }
        }
        let next = self.clouds_of(v).find(|&c| self.kind_of(c) == Some(CloudKind::Secondary));
        match next {
            Some(c) => {
                self.secondary_duty.insert(v, c);
            }
            None => {
                self.secondary_duty.remove(&v);
            }
        }
    }

    /// Removes a deleted node from every cloud. Returns the clouds it belonged
    /// to and, per secondary cloud, the clouds it was the link for.
    fn detach(&mut self, v: NodeId) -> (Vec<CloudId>, BTreeMap<CloudId, Vec<CloudId>>) {
        let clouds: Vec<CloudId> = self.memberships.remove(&v).unwrap_or_default().into_iter().collect();
        for id in &clouds {
            let cloud = self.clouds.get_mut(id).expect("membership implies registration");
            cloud.members.remove(&v);
            cloud.topology.prune(v);
        }
        let mut lost: BTreeMap<CloudId, Vec<CloudId>> = BTreeMap::new();
        self.bridges.retain(|&(sec, linked), x| {
            if *x == v {
                lost.entry(sec).or_default().push(linked);
                false
            } else {
                true
            }
        });
        self.secondary_duty.remove(&v);
        for &id in &clouds {
            if self.clouds[&id].members.is_empty() {
                self.retire(id, None);
            }
        }
        (clouds, lost)
    }

    /// Drops a cloud. Links to it are handed to `successor` when given.
    fn retire(&mut self, id: CloudId, successor: Option<CloudId>) {
        let Some(cloud) = self.clouds.remove(&id) else {
            return;
        };
        for &m in &cloud.members {
            self.leave(m, id);
        }
        let mut moved = Vec::new();
        self.bridges.retain(|&(sec, linked), x| {
            if sec == id {
                return false;
            }
            if linked == id {
                moved.push((sec, *x));
                return false;
            }
            true
        });
        if let Some(succ) = successor {
            for (sec, x) in moved {
                if sec != succ {
                    self.bridges.entry((sec, succ)).or_insert(x);
                }
            }
        }
        let affected: Vec<NodeId> = self.secondary_duty.iter().filter(|&(_, &c)| c == id).map(|(&v, _)| v).collect();
        for v in affected {
            self.refresh_duty(v);
        }
    }

    pub(crate) fn restore(
        clouds: Vec<Cloud>,
        bridges: BTreeMap<(CloudId, CloudId), NodeId>,
        secondary_duty: BTreeMap<NodeId, CloudId>,
    ) -> Self {
        let mut reg = CloudRegistry::default();
        for c in clouds {
            reg.install(c);
        }
        reg.bridges = bridges;
        reg.secondary_duty = secondary_duty;
        reg
    }
}

/// A participant of a secondary cloud: a cloud represented by one of its free
/// nodes, or a black neighbor joining directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Participant {
    Cloud(CloudId),
    Node(NodeId),
}

/// Which top-level repair branch handled a deletion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepairBranch {
    AllBlack,
    PrimaryOnly,
    WithSecondary,
    Skipped,
}

#[derive(Debug, Clone)]
pub struct HealerState {
    pub(crate) config: EngineConfig,
    pub(crate) graph: ColoredGraph,
    pub(crate) shadow: ShadowGraph,
    pub(crate) registry: CloudRegistry,
    pub(crate) next_cloud_id: u64,
    /// Topology builds so far; selects the rng stream of the next build.
    pub(crate) builds: u64,
    pub(crate) t: u64,
    pub(crate) totals: RepairCounters,
    pub(crate) last: RepairCounters,
    pub(crate) last_black_nbrs: BTreeSet<NodeId>,
    pub(crate) last_branch: Option<RepairBranch>,
    pub(crate) fault_done: bool,
    /// Black neighbors of the node being repaired; each will join one new cloud.
    pending: BTreeSet<NodeId>,
}

impl HealerState {
    /// Starts from an initial graph whose edges are all black.
    pub fn new(config: EngineConfig, nodes: &[NodeId], edges: &[(NodeId, NodeId)]) -> Result<Self, EngineError> {
        config.expander.validate()?;
        let mut graph = ColoredGraph::new();
        let mut shadow = ShadowGraph::new();
        for &v in nodes {
            graph.add_node(v)?;
            shadow.insert(v, &[])?;
        }
        for &(a, b) in edges {
            graph.add_black_edge(a, b)?;
            shadow.add_initial_edge(a, b)?;
        }
        Ok(HealerState {
            config,
            graph,
            shadow,
            registry: CloudRegistry::default(),
            next_cloud_id: 1,
            builds: 0,
            t: 0,
            totals: RepairCounters::default(),
            last: RepairCounters::default(),
            last_black_nbrs: BTreeSet::new(),
            last_branch: None,
            fault_done: false,
            pending: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn kappa(&self) -> usize {
        self.config.expander.kappa
    }

    pub fn graph(&self) -> &ColoredGraph {
        &self.graph
    }

    pub fn shadow(&self) -> &ShadowGraph {
        &self.shadow
    }

    pub fn registry(&self) -> &CloudRegistry {
        &self.registry
    }

    /// Events applied so far.
    pub fn time(&self) -> u64 {
        self.t
    }

    pub fn counters(&self) -> &RepairCounters {
        &self.totals
    }

    pub fn last_counters(&self) -> &RepairCounters {
        &self.last
    }

    pub fn last_branch(&self) -> Option<RepairBranch> {
        self.last_branch
    }

    /// Black neighbors of the most recently deleted node.
    pub fn last_black_neighbors(&self) -> &BTreeSet<NodeId> {
        &self.last_black_nbrs
    }

    pub fn next_node_id(&self) -> NodeId {
        self.shadow.next_node_id()
    }

    pub fn validate_event(&self, e: &Event) -> Result<(), EngineError> {
        match e {
            Event::Insert { node, neighbors } => {
                if *node < self.next_node_id() {
                    return Err(EngineError::InvalidEvent(format!("node id {node} is not fresh")));
                }
                let mut seen = BTreeSet::new();
                for &u in neighbors {
                    if u == *node || !seen.insert(u) {
                        return Err(EngineError::InvalidEvent(format!("bad neighbor {u} for {node}")));
                    }
                    if !self.graph.contains(u) {
                        return Err(EngineError::InvalidEvent(format!("neighbor {u} is not alive")));
                    }
                }
            }
            Event::Delete { node } => {
                if !self.graph.contains(*node) {
                    return Err(EngineError::InvalidEvent(format!("node {node} is not alive")));
                }
            }
        }
        Ok(())
    }

    /// Applies one adversarial event and heals.
    pub fn handle_event(&mut self, e: &Event) -> Result<(), EngineError> {
        self.validate_event(e)?;
        self.last = RepairCounters::default();
        self.last_branch = None;
        self.t += 1;
        match e {
            Event::Insert { node, neighbors } => {
                self.shadow.insert(*node, neighbors)?;
                self.graph.add_node(*node)?;
                for &u in neighbors {
                    self.graph.add_black_edge(*node, u)?;
                }
                self.last.inserts += 1;
            }
            Event::Delete { node } => self.handle_delete(*node)?,
        }
        if self.config.fault == Some(Fault::DropBlackEdge) && !self.fault_done {
            let victim = self.graph.edges().find(|r| r.is_black()).map(|r| r.key);
            if let Some(key) = victim {
                self.graph.remove_edge(key.lo(), key.hi())?;
                self.fault_done = true;
                self.last.faults_injected += 1;
            }
        }
        self.totals.add(&self.last);
        Ok(())
    }

    fn handle_delete(&mut self, v: NodeId) -> Result<(), EngineError> {
        self.last.deletes += 1;
        self.shadow.delete(v)?;
        self.graph.begin_repair();
        let removed = self.graph.remove_node(v)?;
        let black = black_neighbors(v, &removed);
        self.last_black_nbrs = black.clone();
        let (clouds_of_v, lost_links) = self.registry.detach(v);

        if self.config.fault == Some(Fault::SkipHeal) {
            self.last_branch = Some(RepairBranch::Skipped);
            self.last.faults_injected += 1;
            self.graph.end_repair()?;
            return Ok(());
        }

        self.pending = black.clone();
        let branch = dispatch(&removed);
        self.last_branch = Some(branch);
        let alive_clouds = |reg: &CloudRegistry, kind: CloudKind| -> Vec<CloudId> {
            clouds_of_v.iter().copied().filter(|&c| reg.kind_of(c) == Some(kind)).collect()
        };
        match branch {
            RepairBranch::AllBlack => {
                self.last.branch_all_black += 1;
                self.handle_delete_all_black(&black)?;
            }
            RepairBranch::PrimaryOnly => {
                self.last.branch_primary += 1;
                let primaries = alive_clouds(&self.registry, CloudKind::Primary);
                self.fix_primary(&primaries)?;
                self.link_neighborhood(&primaries, &black)?;
            }
            RepairBranch::WithSecondary => {
                self.last.branch_secondary += 1;
                let primaries = alive_clouds(&self.registry, CloudKind::Primary);
                let secondaries = alive_clouds(&self.registry, CloudKind::Secondary);
                self.fix_primary(&primaries)?;
                let mut pieces: Vec<CloudId> = primaries.iter().chain(&secondaries).copied().collect();
                for &f in &secondaries {
                    let lost = lost_links.get(&f).cloned().unwrap_or_default();
                    if let Some(merged) = self.fix_secondary(f, &lost)? {
                        pieces.push(merged);
                    }
                }
                pieces.retain(|&c| self.registry.contains(c));
                self.link_neighborhood(&pieces, &black)?;
            }
            RepairBranch::Skipped => unreachable!("dispatch never skips"),
        }
        self.pending.clear();
        self.graph.end_repair()?;
        Ok(())
    }

    /// All removed edges were plain black: the black neighbors form a new primary cloud.
    pub fn handle_delete_all_black(&mut self, black: &BTreeSet<NodeId>) -> Result<Option<CloudId>, EngineError> {
        if black.is_empty() {
            return Ok(None);
        }
        let id = self.make_cloud(black, CloudKind::Primary, None)?;
        Ok(Some(id))
    }

    /// Rebuilds each primary cloud over its surviving members, same color.
    pub fn fix_primary(&mut self, clouds: &[CloudId]) -> Result<(), EngineError> {
        let clouds: Vec<CloudId> = clouds.iter().copied().filter(|&c| self.registry.contains(c)).collect();
        if clouds.is_empty() {
            return Ok(());
        }
        let marked = self.mark_edges(&clouds)?;
        for &c in &clouds {
            let members = self.registry.clouds[&c].members.clone();
            self.make_cloud(&members, CloudKind::Primary, Some(c))?;
            self.last.clouds_rebuilt += 1;
        }
        self.delete_edges(&marked)?;
        Ok(())
    }

    /// Connects the pieces left around a deleted node with one secondary cloud.
    ///
    /// Pieces that already share a surviving member are connected through it
    /// and are represented once, preferring a primary cloud.
    fn link_neighborhood(&mut self, pieces: &[CloudId], black: &BTreeSet<NodeId>) -> Result<(), EngineError> {
        let pieces: Vec<CloudId> = pieces
            .iter()
            .copied()
            .filter(|&c| self.registry.contains(c))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut group: Vec<usize> = (0..pieces.len()).collect();
        fn root(group: &mut [usize], mut i: usize) -> usize {
            while group[i] != i {
                group[i] = group[group[i]];
                i = group[i];
            }
            i
        }
        for i in 0..pieces.len() {
            for j in i + 1..pieces.len() {
                let a = &self.registry.clouds[&pieces[i]].members;
                let b = &self.registry.clouds[&pieces[j]].members;
                if !a.is_disjoint(b) {
                    let (ri, rj) = (root(&mut group, i), root(&mut group, j));
                    group[ri.max(rj)] = ri.min(rj);
                }
            }
        }
        let mut reps: BTreeMap<usize, CloudId> = BTreeMap::new();
        for (i, &cand) in pieces.iter().enumerate() {
            let r = root(&mut group, i);
            let better = match reps.get(&r) {
                None => true,
                Some(&cur) => {
                    let key = |c: CloudId| (self.registry.kind_of(c) != Some(CloudKind::Primary), c);
                    key(cand) < key(cur)
                }
            };
            if better {
                reps.insert(r, cand);
            }
        }
        let mut participants: Vec<Participant> =
            reps.into_values().collect::<BTreeSet<_>>().into_iter().map(Participant::Cloud).collect();
        participants.extend(black.iter().map(|&b| Participant::Node(b)));
        if participants.len() < 2 {
            return Ok(());
        }
        self.make_secondary(&participants)?;
        Ok(())
    }

    /// Builds a secondary cloud over one free node per cloud participant plus
    /// the node participants. If some cloud has no free node, all cloud
    /// participants (and the node participants) are merged instead.
    pub fn make_secondary(&mut self, participants: &[Participant]) -> Result<Option<CloudId>, EngineError> {
        let clouds: Vec<CloudId> = participants
            .iter()
            .filter_map(|p| match p {
                Participant::Cloud(c) => Some(*c),
                Participant::Node(_) => None,
            })
            .collect();
        let nodes: Vec<NodeId> = participants
            .iter()
            .filter_map(|p| match p {
                Participant::Node(v) => Some(*v),
                Participant::Cloud(_) => None,
            })
            .collect();
        let mut picks = Vec::with_capacity(clouds.len());
        for &c in &clouds {
            match self.pick_free_node(c) {
                Some(x) => picks.push((c, x)),
                None => {
                    let id = self.merge_clouds(&clouds, &nodes)?;
                    return Ok(Some(id));
                }
            }
        }
        let members: BTreeSet<NodeId> = picks.iter().map(|&(_, x)| x).chain(nodes.iter().copied()).collect();
        if members.len() < 2 {
            return Ok(None);
        }
        let id = self.make_cloud(&members, CloudKind::Secondary, None)?;
        for (c, x) in picks {
            self.registry.bridges.insert((id, c), x);
            self.registry.assign_duty(x, id);
        }
        for v in nodes {
            self.registry.assign_duty(v, id);
        }
        self.last.secondaries_created += 1;
        Ok(Some(id))
    }

    /// Repairs secondary cloud `sec` after a member was deleted. `lost` lists
    /// the clouds whose link node was the deleted member. Returns the merged
    /// cloud when no replacement link could be found.
    pub fn fix_secondary(&mut self, sec: CloudId, lost: &[CloudId]) -> Result<Option<CloudId>, EngineError> {
        if !self.registry.contains(sec) {
            return Ok(None);
        }
        let mut replacements = Vec::new();
        for &c in lost {
            if !self.registry.contains(c) {
                continue;
            }
            match self.pick_free_node(c) {
                Some(x) => replacements.push((c, x)),
                None => {
                    let mut list = vec![sec];
                    list.extend(self.registry.bridged_by(sec).into_iter().map(|(c, _)| c));
                    list.extend(lost.iter().copied().filter(|&c| self.registry.contains(c)));
                    let merged = self.merge_clouds(&list, &[])?;
                    return Ok(Some(merged));
                }
            }
        }
        let marked = self.mark_edges(&[sec])?;
        let mut members = self.registry.clouds[&sec].members.clone();
        members.extend(replacements.iter().map(|&(_, x)| x));
        self.make_cloud(&members, CloudKind::Secondary, Some(sec))?;
        self.delete_edges(&marked)?;
        for (c, x) in replacements {
            self.registry.bridges.insert((sec, c), x);
            self.registry.assign_duty(x, sec);
        }
        self.last.clouds_rebuilt += 1;
        Ok(None)
    }

    /// Replaces the listed clouds by one fresh primary cloud over all their
    /// members plus `extra`.
    pub fn merge_clouds(&mut self, clouds: &[CloudId], extra: &[NodeId]) -> Result<CloudId, EngineError> {
        let list: Vec<CloudId> = clouds
            .iter()
            .copied()
            .filter(|&c| self.registry.contains(c))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut members: BTreeSet<NodeId> = extra.iter().copied().collect();
        for c in &list {
            members.extend(self.registry.clouds[c].members.iter().copied());
        }
        let marked = self.mark_edges(&list)?;
        let id = self.make_cloud(&members, CloudKind::Primary, None)?;
        self.delete_edges(&marked)?;
        for &c in &list {
            self.registry.retire(c, Some(id));
        }
        self.last.merges += 1;
        self.last.clouds_merged += list.len() as u64;
        Ok(id)
    }

    /// A node may take a new secondary duty if it holds none and has budget:
    /// one cloud per lost black edge, plus one.
    fn is_free(&self, x: NodeId) -> bool {
        self.graph.contains(x)
            && self.registry.duty(x).is_none()
            && self.registry.membership_count(x) + usize::from(self.pending.contains(&x)) <= self.shadow.dead_degree(x)
    }

    /// Smallest free member of `c`; failing that, the smallest free member of
    /// any primary cloud sharing a member with `c`.
    pub fn pick_free_node(&mut self, c: CloudId) -> Option<NodeId> {
        let cloud = self.registry.clouds.get(&c)?;
        if let Some(&x) = cloud.members.iter().find(|&&x| self.is_free(x)) {
            self.last.free_local += 1;
            return Some(x);
        }
        let mut best: Option<NodeId> = None;
        for &m in &cloud.members {
            for other in self.registry.clouds_of(m) {
                if other == c || self.registry.kind_of(other) != Some(CloudKind::Primary) {
                    continue;
                }
                let found = self.registry.clouds[&other].members.iter().copied().find(|&x| self.is_free(x));
                if let Some(x) = found {
                    best = Some(best.map_or(x, |b| b.min(x)));
                }
            }
        }
        match best {
            Some(_) => self.last.free_borrowed += 1,
            None => self.last.free_null += 1,
        }
        best
    }

    /// Builds a topology over `members` and lays it down with the cloud's
    /// color, reusing existing edges. With `existing`, that cloud is rebuilt
    /// under its own color; otherwise a fresh cloud is registered.
    pub fn make_cloud(
        &mut self,
        members: &BTreeSet<NodeId>,
        kind: CloudKind,
        existing: Option<CloudId>,
    ) -> Result<CloudId, EngineError> {
        let id = existing.unwrap_or_else(|| {
            let id = CloudId(self.next_cloud_id);
            self.next_cloud_id += 1;
            self.last.clouds_created += 1;
            id
        });
        let ordered: Vec<NodeId> = members.iter().copied().collect();
        if let Some(&dead) = ordered.iter().find(|&&m| !self.graph.contains(m)) {
            return Err(GraphError::UnknownNode(dead).into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.builds);
        self.builds += 1;
        let topology = match expander::build_topology(&ordered, &self.config.expander, &mut rng) {
            Ok(t) => t,
            Err(ExpanderError::RetriesExhausted { best, .. }) => {
                self.last.uncertified_builds += 1;
                match best {
                    Some(t) => *t,
                    None => expander::circulant_topology(&ordered, &self.config.expander)?,
                }
            }
            Err(e) => return Err(e.into()),
        };
        let color = Color::Cloud(id);
        for e in &topology.edges {
            match self.graph.ensure_edge_color(e.lo(), e.hi(), color, kind)? {
                EdgeUse::Created => self.last.edges_created += 1,
                EdgeUse::Reused => self.last.edges_reused += 1,
            }
        }
        self.registry.install(Cloud { id, kind, members: members.clone(), topology });
        Ok(id)
    }

    /// Strips each cloud's color from its topology edges. Returns the edges
    /// touched, for the matching [`delete_edges`](Self::delete_edges).
    pub fn mark_edges(&mut self, clouds: &[CloudId]) -> Result<Vec<EdgeKey>, EngineError> {
        let mut touched = BTreeSet::new();
        for &c in clouds {
            let Some(cloud) = self.registry.clouds.get(&c) else {
                continue;
            };
            for e in &cloud.topology.edges {
                self.graph.strip_color(e.lo(), e.hi(), Color::Cloud(c))?;
                touched.insert(*e);
            }
        }
        Ok(touched.into_iter().collect())
    }

    /// Removes touched edges that are still marked and colorless; unmarks the rest.
    pub fn delete_edges(&mut self, touched: &[EdgeKey]) -> Result<(), EngineError> {
        for key in touched {
            let marked = self.graph.edge(key.lo(), key.hi()).is_some_and(EdgeRecord::is_marked);
            if marked && self.graph.purge_if_colorless(key.lo(), key.hi())? == PurgeOutcome::Deleted {
                self.last.edges_deleted += 1;
            }
        }
        Ok(())
    }

    /// Recomputes every edge's color set from the registry and the shadow and
    /// compares it with the live graph, together with the registry's own
    /// invariants. Returns one message per mismatch.
    pub fn coherence_check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let mut expected: BTreeMap<EdgeKey, (bool, BTreeMap<CloudId, CloudKind>)> = BTreeMap::new();
        for key in self.shadow.edges() {
            if self.shadow.is_alive(key.lo()) && self.shadow.is_alive(key.hi()) {
                expected.entry(key).or_default().0 = true;
            }
        }
        for cloud in self.registry.clouds() {
            if cloud.members.is_empty() {
                problems.push(format!("cloud {} has no members", cloud.id));
            }
            let topo_members: BTreeSet<NodeId> = cloud.topology.members.iter().copied().collect();
            if topo_members != cloud.members {
                problems.push(format!("cloud {} topology members differ from its member set", cloud.id));
            }
            for &m in &cloud.members {
                if !self.graph.contains(m) {
                    problems.push(format!("cloud {} contains dead node {m}", cloud.id));
                }
                if !self.registry.memberships.get(&m).is_some_and(|s| s.contains(&cloud.id)) {
                    problems.push(format!("membership of {m} in cloud {} not indexed", cloud.id));
                }
            }
            for e in &cloud.topology.edges {
                if !cloud.members.contains(&e.lo()) || !cloud.members.contains(&e.hi()) {
                    problems.push(format!("cloud {} edge {e} leaves its member set", cloud.id));
                }
                expected.entry(*e).or_default().1.insert(cloud.id, cloud.kind);
            }
        }
        for (&v, set) in &self.registry.memberships {
            for c in set {
                if !self.registry.get(*c).is_some_and(|cl| cl.members.contains(&v)) {
                    problems.push(format!("node {v} indexed in cloud {c} but not a member"));
                }
            }
        }
        for (&(sec, linked), &x) in &self.registry.bridges {
            match self.registry.get(sec) {
                Some(c) if c.kind == CloudKind::Secondary && c.members.contains(&x) => {}
                _ => problems.push(format!("link ({sec},{linked}) -> {x} is not a member of a secondary cloud")),
            }
            if !self.registry.contains(linked) {
                problems.push(format!("link ({sec},{linked}) names a retired cloud"));
            }
        }
        for v in self.graph.nodes() {
            let in_secondary =
                self.registry.clouds_of(v).any(|c| self.registry.kind_of(c) == Some(CloudKind::Secondary));
            match self.registry.duty(v) {
                Some(d) => {
                    if !self.registry.get(d).is_some_and(|c| c.kind == CloudKind::Secondary && c.members.contains(&v)) {
                        problems.push(format!("duty of {v} names cloud {d} it is not in"));
                    }
                }
                None if in_secondary => problems.push(format!("node {v} is in a secondary cloud without duty")),
                None => {}
            }
        }
        for rec in self.graph.edges() {
            match expected.remove(&rec.key) {
                None => problems.push(format!("edge {} has no source in shadow or registry", rec.key)),
                Some((black, kinds)) => {
                    if black != rec.is_black() || &kinds != rec.kinds() {
                        let got: Vec<String> = rec.colors().map(|c| c.to_string()).collect();
                        problems.push(format!("edge {} colors {:?} do not match the registry", rec.key, got));
                    }
                }
            }
        }
        for key in expected.keys() {
            problems.push(format!("expected edge {key} is missing"));
        }
        if let Err(e) = self.graph.check_clean() {
            problems.push(e.to_string());
        }
        problems
    }
}

/// Chooses the repair branch from the colors of the removed edges.
fn dispatch(removed: &[EdgeRecord]) -> RepairBranch {
    let mut any_cloud = false;
    for rec in removed {
        for &kind in rec.kinds().values() {
            any_cloud = true;
            if kind == CloudKind::Secondary {
                return RepairBranch::WithSecondary;
            }
        }
    }
    if any_cloud {
        RepairBranch::PrimaryOnly
    } else {
        RepairBranch::AllBlack
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u64) -> NodeId {
        NodeId(i)
    }

    fn state(nodes: u64, edges: &[(u64, u64)]) -> HealerState {
        let nodes: Vec<NodeId> = (0..nodes).map(n).collect();
        let edges: Vec<(NodeId, NodeId)> = edges.iter().map(|&(a, b)| (n(a), n(b))).collect();
        HealerState::new(EngineConfig::new(ExpanderConfig::default(), 3), &nodes, &edges).unwrap()
    }

    fn del(st: &mut HealerState, v: u64) {
        st.handle_event(&Event::Delete { node: n(v) }).unwrap();
        assert!(st.coherence_check().is_empty(), "{:?}", st.coherence_check());
    }

    fn colors(st: &HealerState, a: u64, b: u64) -> Vec<Color> {
        st.graph.edge(n(a), n(b)).map(|e| e.colors().collect()).unwrap_or_default()
    }

    #[test]
    fn insert_adds_black_edges_only() {
        let mut st = state(2, &[(0, 1)]);
        st.handle_event(&Event::Insert { node: n(2), neighbors: vec![n(0), n(1)] }).unwrap();
        assert_eq!(colors(&st, 2, 0), vec![Color::Black]);
        assert_eq!(colors(&st, 2, 1), vec![Color::Black]);
        assert!(st.registry.is_empty());
        assert_eq!(st.counters().inserts, 1);
    }

    #[test]
    fn invalid_events_rejected() {
        let mut st = state(2, &[(0, 1)]);
        assert!(st.handle_event(&Event::Delete { node: n(5) }).is_err());
        assert!(st.handle_event(&Event::Insert { node: n(1), neighbors: vec![] }).is_err());
        assert!(st.handle_event(&Event::Insert { node: n(2), neighbors: vec![n(9)] }).is_err());
        assert!(st.handle_event(&Event::Insert { node: n(2), neighbors: vec![n(0), n(0)] }).is_err());
        assert_eq!(st.time(), 0);
    }

    #[test]
    fn star_deletion_builds_primary_clique() {
        let mut st = state(4, &[(0, 1), (0, 2), (0, 3)]);
        del(&mut st, 0);
        assert_eq!(st.last_branch(), Some(RepairBranch::AllBlack));
        let c = Color::Cloud(CloudId(1));
        for (a, b) in [(1, 2), (1, 3), (2, 3)] {
            assert_eq!(colors(&st, a, b), vec![c]);
        }
        assert_eq!(st.graph.edge_count(), 3);
    }

    #[test]
    fn single_black_neighbor_gives_lone_cloud() {
        let mut st = state(2, &[(0, 1)]);
        del(&mut st, 0);
        let cloud = st.registry.clouds().next().unwrap();
        assert_eq!(cloud.members, BTreeSet::from([n(1)]));
        assert!(cloud.topology.edges.is_empty());
        assert_eq!(st.graph.edge_count(), 0);
    }

    #[test]
    fn existing_black_edge_is_reused() {
        let mut st = state(3, &[(0, 1), (0, 2), (1, 2)]);
        del(&mut st, 0);
        assert_eq!(colors(&st, 1, 2), vec![Color::Black, Color::Cloud(CloudId(1))]);
        assert_eq!(st.last_counters().edges_reused, 1);
        assert_eq!(st.last_counters().edges_created, 0);
    }

    #[test]
    fn primary_repair_keeps_black_edges() {
        // 0 is the hub of {1,2,3,4}; 1-2 black. Deleting 0 gives clique C1 on {1,2,3,4}.
        let mut st = state(5, &[(0, 1), (0, 2), (0, 3), (0, 4), (1, 2)]);
        del(&mut st, 0);
        del(&mut st, 4);
        assert_eq!(st.last_branch(), Some(RepairBranch::PrimaryOnly));
        let c1 = st.registry.get(CloudId(1)).unwrap();
        assert_eq!(c1.members, BTreeSet::from([n(1), n(2), n(3)]));
        assert_eq!(c1.topology.edges.len(), 3);
        assert_eq!(colors(&st, 1, 2), vec![Color::Black, Color::Cloud(CloudId(1))]);
        // A lone primary with no black neighbors needs no secondary.
        assert_eq!(st.counters().secondaries_created, 0);
        del(&mut st, 3);
        del(&mut st, 2);
        let c1 = st.registry.get(CloudId(1)).unwrap();
        assert_eq!(c1.members, BTreeSet::from([n(1)]));
        assert_eq!(st.graph.edge_count(), 0);
    }

    #[test]
    fn two_primaries_get_a_secondary() {
        // Hubs 0 and 1 share neighbor 2. Deleting both puts 2 in two primary clouds.
        let mut st = state(7, &[(0, 2), (0, 3), (0, 4), (1, 2), (1, 5), (1, 6)]);
        del(&mut st, 0);
        del(&mut st, 1);
        assert_eq!(st.registry.len(), 2);
        del(&mut st, 2);
        assert_eq!(st.last_branch(), Some(RepairBranch::PrimaryOnly));
        let sec: Vec<&Cloud> = st.registry.clouds().filter(|c| c.kind == CloudKind::Secondary).collect();
        assert_eq!(sec.len(), 1);
        assert_eq!(sec[0].members.len(), 2);
        assert_eq!(sec[0].topology.edges.len(), 1);
        assert_eq!(st.registry.bridged_by(sec[0].id).len(), 2);
        assert!(crate::graph::is_connected(&st.graph));
    }

    #[test]
    fn free_node_prefers_own_cloud_then_neighbors() {
        let mut st = state(7, &[(0, 2), (0, 3), (0, 4), (1, 2), (1, 5), (1, 6)]);
        del(&mut st, 0);
        del(&mut st, 1);
        // Cloud 1 = {2,3,4}, cloud 2 = {2,5,6}; all have budget.
        assert_eq!(st.pick_free_node(CloudId(1)), Some(n(2)));
        // Occupy 3 and 4 with duty so only the shared node's neighbor cloud helps.
        for v in [2, 3, 4] {
            st.registry.secondary_duty.insert(n(v), CloudId(99));
        }
        assert_eq!(st.pick_free_node(CloudId(1)), Some(n(5)));
        assert_eq!(st.last.free_borrowed, 1);
        for v in [5, 6] {
            st.registry.secondary_duty.insert(n(v), CloudId(99));
        }
        assert_eq!(st.pick_free_node(CloudId(1)), None);
        assert_eq!(st.last.free_null, 1);
    }

    #[test]
    fn secondary_over_black_neighbors_only() {
        let mut st = state(4, &[(0, 1), (0, 2), (0, 3)]);
        let id = st
            .make_secondary(&[Participant::Node(n(1)), Participant::Node(n(2)), Participant::Node(n(3))])
            .unwrap()
            .unwrap();
        let cloud = st.registry.get(id).unwrap();
        assert_eq!(cloud.kind, CloudKind::Secondary);
        assert_eq!(cloud.topology.edges.len(), 3);
        assert!(st.graph.edge(n(1), n(2)).unwrap().kind_of(id) == Some(CloudKind::Secondary));
    }

    #[test]
    fn merge_replaces_clouds() {
        let mut st = state(6, &[(0, 1), (0, 2), (5, 3), (5, 4)]);
        del(&mut st, 0);
        del(&mut st, 5);
        let before: Vec<CloudId> = st.registry.clouds().map(|c| c.id).collect();
        st.graph.begin_repair();
        let m = st.merge_clouds(&before, &[]).unwrap();
        st.graph.end_repair().unwrap();
        assert!(st.coherence_check().is_empty(), "{:?}", st.coherence_check());
        let merged = st.registry.get(m).unwrap();
        assert_eq!(merged.members, BTreeSet::from([n(1), n(2), n(3), n(4)]));
        assert_eq!(merged.topology.edges.len(), 6);
        assert_eq!(st.registry.len(), 1);
        // Old cloud-only edges got recolored; nothing else survives.
        assert_eq!(st.graph.edge_count(), 6);
    }

    #[test]
    fn mark_and_delete_respect_colors() {
        let mut st = state(3, &[(0, 1), (0, 2), (1, 2)]);
        del(&mut st, 0);
        let c = CloudId(1);
        st.graph.begin_repair();
        let touched = st.mark_edges(&[c]).unwrap();
        assert_eq!(touched.len(), 1);
        assert!(st.graph.edge(n(1), n(2)).unwrap().is_only_black());
        st.delete_edges(&touched).unwrap();
        assert!(st.graph.edge(n(1), n(2)).is_some());
        st.graph.end_repair().unwrap();
    }

    #[test]
    fn skip_heal_fault_disconnects() {
        let nodes: Vec<NodeId> = (0..3).map(n).collect();
        let mut cfg = EngineConfig::new(ExpanderConfig::default(), 1);
        cfg.fault = Some(Fault::SkipHeal);
        let mut st = HealerState::new(cfg, &nodes, &[(n(0), n(1)), (n(0), n(2))]).unwrap();
        st.handle_event(&Event::Delete { node: n(0) }).unwrap();
        assert!(!crate::graph::is_connected(&st.graph));
    }

    #[test]
    fn counters_roundtrip_through_values() {
        let c = RepairCounters { merges: 3, free_null: 2, ..Default::default() };
        assert_eq!(RepairCounters::from_values(&c.values()), Some(c));
        assert_eq!(RepairCounters::names().len(), c.values().len());
    }
}
