//! Versioned JSON dump of a healer state.
//!
//! Edge colors are written as `"B"` and `"C<id>"`. Loading accepts colors of
//! clouds the registry does not know, so a tampered snapshot still loads and
//! the coherence check reports the mismatch.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Cloud, CloudRegistry, EngineConfig, HealerState, RepairCounters};
use crate::expander::CloudTopology;
use crate::graph::{CloudId, CloudKind, ColoredGraph, EdgeKey, EdgeRecord, GraphError, NodeId, ShadowGraph};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("malformed snapshot: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error("invalid snapshot: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Serialize, Deserialize)]
struct ShadowDump {
    nodes: Vec<NodeId>,
    dead: Vec<NodeId>,
    edges: Vec<[NodeId; 2]>,
}

#[derive(Serialize, Deserialize)]
struct EdgeDump {
    u: NodeId,
    v: NodeId,
    colors: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GraphDump {
    nodes: Vec<NodeId>,
    edges: Vec<EdgeDump>,
}

#[derive(Serialize, Deserialize)]
struct TopologyDump {
    kind: crate::expander::TopologyKind,
    members: Vec<NodeId>,
    edges: Vec<[NodeId; 2]>,
    kappa: usize,
    certificate: Option<crate::expander::Certificate>,
}

#[derive(Serialize, Deserialize)]
struct CloudDump {
    id: CloudId,
    kind: CloudKind,
    members: Vec<NodeId>,
    topology: TopologyDump,
}

#[derive(Serialize, Deserialize)]
struct BridgeDump {
    secondary: CloudId,
    linked: CloudId,
    node: NodeId,
}

#[derive(Serialize, Deserialize)]
struct Dump {
    v: u32,
    config: EngineConfig,
    t: u64,
    next_cloud_id: u64,
    builds: u64,
    fault_done: bool,
    totals: RepairCounters,
    last: RepairCounters,
    last_black_neighbors: Vec<NodeId>,
    shadow: ShadowDump,
    graph: GraphDump,
    clouds: Vec<CloudDump>,
    bridges: Vec<BridgeDump>,
    duties: Vec<(NodeId, CloudId)>,
}

fn pair(k: EdgeKey) -> [NodeId; 2] {
    [k.lo(), k.hi()]
}

pub fn dump(state: &HealerState) -> String {
    let sh = &state.shadow;
    let shadow = ShadowDump {
        nodes: sh.nodes().collect(),
        dead: sh.nodes().filter(|&v| !sh.is_alive(v)).collect(),
        edges: sh.edges().map(pair).collect(),
    };
    let graph = GraphDump {
        nodes: state.graph.nodes().collect(),
        edges: state
            .graph
            .edges()
            .map(|r| EdgeDump { u: r.key.lo(), v: r.key.hi(), colors: r.colors().map(|c| c.to_string()).collect() })
            .collect(),
    };
    let clouds = state
        .registry
        .clouds()
        .map(|c| CloudDump {
            id: c.id,
            kind: c.kind,
            members: c.members.iter().copied().collect(),
            topology: TopologyDump {
                kind: c.topology.kind,
                members: c.topology.members.clone(),
                edges: c.topology.edges.iter().copied().map(pair).collect(),
                kappa: c.topology.kappa,
                certificate: c.topology.certificate,
            },
        })
        .collect();
    let d = Dump {
        v: SNAPSHOT_VERSION,
        config: state.config.clone(),
        t: state.t,
        next_cloud_id: state.next_cloud_id,
        builds: state.builds,
        fault_done: state.fault_done,
        totals: state.totals,
        last: state.last,
        last_black_neighbors: state.last_black_nbrs.iter().copied().collect(),
        shadow,
        graph,
        clouds,
        bridges: state
            .registry
            .bridges()
            .iter()
            .map(|(&(secondary, linked), &node)| BridgeDump { secondary, linked, node })
            .collect(),
        duties: state.registry.duties().iter().map(|(&v, &c)| (v, c)).collect(),
    };
    let mut text = serde_json::to_string_pretty(&d).expect("snapshot serializes");
    text.push('\n');
    text
}

#[derive(Deserialize)]
struct VersionProbe {
    v: u32,
}

fn parse_color(s: &str) -> Result<Option<CloudId>, SnapshotError> {
    if s == "B" {
        return Ok(None);
    }
    s.strip_prefix('C')
        .and_then(|id| id.parse().ok())
        .map(|id| Some(CloudId(id)))
        .ok_or_else(|| SnapshotError::Invalid(format!("bad color '{s}'")))
}

pub fn load(text: &str) -> Result<HealerState, SnapshotError> {
    let probe: VersionProbe = serde_json::from_str(text)?;
    if probe.v != SNAPSHOT_VERSION {
        return Err(SnapshotError::Version(probe.v));
    }
    let d: Dump = serde_json::from_str(text)?;

    let mut adjacency: BTreeMap<NodeId, BTreeSet<NodeId>> =
        d.shadow.nodes.iter().map(|&v| (v, BTreeSet::new())).collect();
    for [a, b] in &d.shadow.edges {
        if a == b || !adjacency.contains_key(a) || !adjacency.contains_key(b) {
            return Err(SnapshotError::Invalid(format!("bad shadow edge ({a}, {b})")));
        }
        adjacency.get_mut(a).expect("checked").insert(*b);
        adjacency.get_mut(b).expect("checked").insert(*a);
    }
    let dead: BTreeSet<NodeId> = d.shadow.dead.iter().copied().collect();
    let alive: BTreeSet<NodeId> = adjacency.keys().copied().filter(|v| !dead.contains(v)).collect();
    let shadow = ShadowGraph::restore(adjacency, alive);

    let kinds: BTreeMap<CloudId, CloudKind> = d.clouds.iter().map(|c| (c.id, c.kind)).collect();
    let mut graph = ColoredGraph::new();
    for &v in &d.graph.nodes {
        graph.add_node(v)?;
    }
    for e in &d.graph.edges {
        let mut black = false;
        let mut clouds = BTreeMap::new();
        for c in &e.colors {
            match parse_color(c)? {
                None => black = true,
                // A color with no registered cloud is kept as primary; the
                // coherence check flags it.
                Some(id) => {
                    clouds.insert(id, kinds.get(&id).copied().unwrap_or(CloudKind::Primary));
                }
            }
        }
        graph.insert_record(EdgeRecord::from_parts(EdgeKey::new(e.u, e.v), black, clouds))?;
    }

    let clouds = d
        .clouds
        .into_iter()
        .map(|c| Cloud {
            id: c.id,
            kind: c.kind,
            members: c.members.into_iter().collect(),
            topology: CloudTopology {
                kind: c.topology.kind,
                members: c.topology.members,
                edges: c.topology.edges.iter().map(|[a, b]| EdgeKey::new(*a, *b)).collect(),
                kappa: c.topology.kappa,
                certificate: c.topology.certificate,
            },
        })
        .collect();
    let bridges = d.bridges.iter().map(|b| ((b.secondary, b.linked), b.node)).collect();
    let duties = d.duties.into_iter().collect();
    let registry = CloudRegistry::restore(clouds, bridges, duties);

    let mut state = HealerState::new(d.config, &[], &[]).map_err(|e| SnapshotError::Invalid(e.to_string()))?;
    state.graph = graph;
    state.shadow = shadow;
    state.registry = registry;
    state.t = d.t;
    state.next_cloud_id = d.next_cloud_id;
    state.builds = d.builds;
    state.fault_done = d.fault_done;
    state.totals = d.totals;
    state.last = d.last;
    state.last_black_nbrs = d.last_black_neighbors.into_iter().collect();
    Ok(state)
}
