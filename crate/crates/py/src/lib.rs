//! Python bindings: a `Healer` class wrapping the healing engine, plus trace
//! generation, checked replay and the exact graph metrics.

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use xheal_core::adversary::{decode_trace, encode_trace, gen_trace, Event, Strategy, StrategyKind};
use xheal_core::engine::{EngineConfig, HealerState, RepairCounters};
use xheal_core::expander::{expansion_exact, ExpanderConfig};
use xheal_core::graph::NodeId;
use xheal_core::metrics::{self, SPECTRAL_CAP};
use xheal_core::sim::{run_trace, SimConfig};
use xheal_core::{ratio, report, snapshot};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn ids(v: &[u64]) -> Vec<NodeId> {
    v.iter().copied().map(NodeId).collect()
}

fn counters_dict(c: &RepairCounters) -> BTreeMap<&'static str, u64> {
    RepairCounters::names().into_iter().zip(c.values()).collect()
}

/// A healing network. Edges of the initial graph are black (original).
#[pyclass(module = "xheal")]
struct Healer {
    state: HealerState,
}

#[pymethods]
impl Healer {
    #[new]
    #[pyo3(signature = (nodes, edges, kappa = 6, seed = 0))]
    fn new(nodes: Vec<u64>, edges: Vec<(u64, u64)>, kappa: usize, seed: u64) -> PyResult<Self> {
        let expander = ExpanderConfig { kappa, ..ExpanderConfig::default() };
        let edges: Vec<(NodeId, NodeId)> = edges.into_iter().map(|(a, b)| (NodeId(a), NodeId(b))).collect();
        let state = HealerState::new(EngineConfig::new(expander, seed), &ids(&nodes), &edges).map_err(value_err)?;
        Ok(Healer { state })
    }

    /// Restores a healer from `snapshot()` output.
    #[staticmethod]
    fn from_snapshot(text: &str) -> PyResult<Self> {
        Ok(Healer { state: snapshot::load(text).map_err(value_err)? })
    }

    fn snapshot(&self) -> String {
        snapshot::dump(&self.state)
    }

    /// Inserts a fresh node wired to alive `neighbors`.
    fn insert(&mut self, node: u64, neighbors: Vec<u64>) -> PyResult<()> {
        let e = Event::Insert { node: NodeId(node), neighbors: ids(&neighbors) };
        self.state.handle_event(&e).map_err(value_err)
    }

    /// Deletes `node` and heals around it.
    fn delete(&mut self, node: u64) -> PyResult<()> {
        self.state.handle_event(&Event::Delete { node: NodeId(node) }).map_err(value_err)
    }

    #[getter]
    fn time(&self) -> u64 {
        self.state.time()
    }

    fn next_node_id(&self) -> u64 {
        self.state.next_node_id().0
    }

    fn nodes(&self) -> Vec<u64> {
        self.state.graph().nodes().map(|v| v.0).collect()
    }

    /// `(u, v, colors)` for every live edge; colors are `"B"` or `"C<id>"`.
    fn edges(&self) -> Vec<(u64, u64, Vec<String>)> {
        self.state
            .graph()
            .edges()
            .map(|r| (r.key.lo().0, r.key.hi().0, r.colors().map(|c| c.to_string()).collect()))
            .collect()
    }

    fn degree(&self, node: u64) -> usize {
        self.state.graph().degree(NodeId(node))
    }

    /// Degree in the shadow graph, counting deleted neighbors.
    fn shadow_degree(&self, node: u64) -> usize {
        self.state.shadow().degree(NodeId(node))
    }

    /// `{cloud id: (kind, members)}`.
    fn clouds(&self) -> BTreeMap<u64, (String, Vec<u64>)> {
        self.state
            .registry()
            .clouds()
            .map(|c| (c.id.0, (format!("{:?}", c.kind).to_lowercase(), c.members.iter().map(|v| v.0).collect())))
            .collect()
    }

    fn counters(&self) -> BTreeMap<&'static str, u64> {
        counters_dict(self.state.counters())
    }

    /// Registry/graph mismatches; empty when coherent.
    fn coherence(&self) -> Vec<String> {
        self.state.coherence_check()
    }

    /// Per-event invariant verdicts for the current state.
    fn check(&self) -> BTreeMap<&'static str, String> {
        let (g, sh) = (self.state.graph(), self.state.shadow());
        let degree = metrics::check_degree_bound(g, sh, self.state.kappa());
        BTreeMap::from([
            ("edge_preservation", metrics::check_edge_preservation(g, sh).ok().to_string()),
            ("degree_violations", degree.violations.len().to_string()),
            ("min_degree_slack", degree.min_slack.map(ratio::format).unwrap_or_default()),
            ("connectivity", metrics::check_connectivity(g, sh).as_str().to_string()),
        ])
    }

    fn __repr__(&self) -> String {
        format!(
            "Healer(t={}, nodes={}, edges={}, clouds={})",
            self.state.time(),
            self.state.graph().node_count(),
            self.state.graph().edge_count(),
            self.state.registry().len()
        )
    }
}

/// Generates a trace in the line-delimited JSON format.
#[pyfunction]
#[pyo3(signature = (strategy, n0, steps, seed = 0, kappa = 6, insert_fraction = "2/5"))]
fn generate_trace(
    strategy: &str,
    n0: usize,
    steps: usize,
    seed: u64,
    kappa: usize,
    insert_fraction: &str,
) -> PyResult<String> {
    let kind: StrategyKind = strategy.parse().map_err(value_err)?;
    let s = Strategy::new(kind).with_insert_fraction(ratio::parse(insert_fraction).map_err(value_err)?);
    Ok(encode_trace(&gen_trace(&s, kappa, n0, steps, seed).map_err(value_err)?))
}

/// Replays a trace with all checks. Returns the CSV report and the violations.
#[pyfunction]
#[pyo3(signature = (trace, seed = None, checkpoint_every = 10))]
fn run(trace: &str, seed: Option<u64>, checkpoint_every: u64) -> PyResult<(String, Vec<String>)> {
    let trace = decode_trace(trace).map_err(value_err)?;
    let expander = ExpanderConfig { kappa: trace.header.kappa, ..ExpanderConfig::default() };
    let mut cfg = SimConfig::new(EngineConfig::new(expander, seed.unwrap_or(trace.header.seed)));
    cfg.checkpoint_every = checkpoint_every;
    let out = run_trace(cfg, &trace).map_err(value_err)?;
    Ok((report::to_csv(&out.reports), out.violations.iter().map(|v| v.to_string()).collect()))
}

/// Exact edge expansion as `"p/q"` for nodes `0..n`.
#[pyfunction]
fn expansion(n: usize, edges: Vec<(usize, usize)>) -> PyResult<String> {
    expansion_exact(n, &edges, 63).map(ratio::format).map_err(value_err)
}

/// Second smallest Laplacian eigenvalue for nodes `0..n`.
#[pyfunction]
fn lambda2(n: usize, edges: Vec<(usize, usize)>) -> PyResult<f64> {
    metrics::lambda2(n, &edges, SPECTRAL_CAP).map_err(value_err)
}

#[pymodule]
fn xheal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Healer>()?;
    m.add_function(wrap_pyfunction!(generate_trace, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(expansion, m)?)?;
    m.add_function(wrap_pyfunction!(lambda2, m)?)?;
    Ok(())
}
