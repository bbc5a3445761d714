//! Success metrics of the healed graph against the shadow graph, and the
//! bound checks built on them. Every verdict uses exact rationals; λ₂ is the
//! only floating-point quantity and it is reported, never judged.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use num_rational::Rational64;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::RepairCounters;
use crate::expander::{self, ExpanderError};
use crate::graph::{
    bfs_distances, induced_edge_count, is_connected, ColoredGraph, EdgeKey, GraphView, NodeId, ShadowGraph,
};

/// Convergence tolerance passed to the dense symmetric eigensolver.
pub const EIGEN_TOLERANCE: f64 = 1e-9;

/// Default node cap for λ₂.
pub const SPECTRAL_CAP: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpectralError {
    #[error("λ₂ needs at least two nodes")]
    TooSmall,
    #[error("{n} nodes exceeds the spectral cap {cap}")]
    TooLarge { n: usize, cap: usize },
    #[error("eigensolver did not converge")]
    NoConvergence,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PreservationCheck {
    /// Shadow edges between alive nodes that are absent from the live graph
    /// or have lost their black color.
    pub missing: Vec<EdgeKey>,
}

impl PreservationCheck {
    pub fn ok(&self) -> bool {
        self.missing.is_empty()
    }
}

pub fn check_edge_preservation(g: &ColoredGraph, sh: &ShadowGraph) -> PreservationCheck {
    let missing = sh
        .edges()
        .filter(|k| sh.is_alive(k.lo()) && sh.is_alive(k.hi()))
        .filter(|k| !g.edge(k.lo(), k.hi()).is_some_and(|e| e.is_black()))
        .collect();
    PreservationCheck { missing }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DegreeCheck {
    /// Minimum over alive `x` of `κ·deg'(x) + κ − deg(x)`; `None` with no alive nodes.
    pub min_slack: Option<Rational64>,
    pub violations: Vec<(NodeId, i64)>,
}

pub fn check_degree_bound(g: &ColoredGraph, sh: &ShadowGraph, kappa: usize) -> DegreeCheck {
    let k = kappa as i64;
    let mut out = DegreeCheck::default();
    for x in g.nodes() {
        let slack = k * sh.degree(x) as i64 + k - g.degree(x) as i64;
        let r = Rational64::from_integer(slack);
        out.min_slack = Some(out.min_slack.map_or(r, |m| m.min(r)));
        if slack < 0 {
            out.violations.push((x, slack));
        }
    }
    out
}

/// Random non-empty subsets of the live nodes: uniform size, then uniform members.
pub fn sample_subsets<R: Rng + ?Sized>(g: &ColoredGraph, samples: usize, rng: &mut R) -> Vec<BTreeSet<NodeId>> {
    let nodes: Vec<NodeId> = g.nodes().collect();
    if nodes.is_empty() {
        return Vec::new();
    }
    (0..samples)
        .map(|_| {
            let size = rng.random_range(1..=nodes.len());
            nodes.choose_multiple(rng, size).copied().collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DensityViolation {
    pub subset: BTreeSet<NodeId>,
    pub live: Rational64,
    pub bound: Rational64,
    /// Shadow edges inside the subset missing from the live graph.
    pub missing_edges: usize,
}

/// Lower bound: `den_live(S) ≥ den_shadow(S)` and shadow edges inside `S`
/// all present live.
pub fn check_density_on(g: &ColoredGraph, sh: &ShadowGraph, subsets: &[BTreeSet<NodeId>]) -> Vec<DensityViolation> {
    let mut out = Vec::new();
    for s in subsets.iter().filter(|s| !s.is_empty()) {
        let live = Rational64::new(induced_edge_count(g, s) as i64, s.len() as i64);
        let shadow = Rational64::new(induced_edge_count(sh, s) as i64, s.len() as i64);
        let missing_edges = s
            .iter()
            .flat_map(|&x| sh.neighbors(x).filter(move |&u| x < u).map(move |u| (x, u)))
            .filter(|&(x, u)| s.contains(&u) && !g.adjacent(x, u))
            .count();
        if live < shadow || missing_edges > 0 {
            out.push(DensityViolation { subset: s.clone(), live, bound: shadow, missing_edges });
        }
    }
    out
}

pub fn check_density<R: Rng + ?Sized>(
    g: &ColoredGraph,
    sh: &ShadowGraph,
    samples: usize,
    rng: &mut R,
) -> Vec<DensityViolation> {
    check_density_on(g, sh, &sample_subsets(g, samples, rng))
}

/// `den_shadow(S) + κ·Σ deg'(x) / (2|S|) + κ/2`.
pub fn density_upper_bound(sh: &ShadowGraph, s: &BTreeSet<NodeId>, kappa: usize) -> Rational64 {
    let size = s.len() as i64;
    let k = kappa as i64;
    let shadow = Rational64::new(induced_edge_count(sh, s) as i64, size);
    let deg_sum: i64 = s.iter().map(|&x| sh.degree(x) as i64).sum();
    shadow + Rational64::new(k * deg_sum, 2 * size) + Rational64::new(k, 2)
}

/// Upper bound on induced density for each subset.
pub fn check_density_upper_on(
    g: &ColoredGraph,
    sh: &ShadowGraph,
    kappa: usize,
    subsets: &[BTreeSet<NodeId>],
) -> Vec<DensityViolation> {
    let mut out = Vec::new();
    for s in subsets.iter().filter(|s| !s.is_empty()) {
        let live = Rational64::new(induced_edge_count(g, s) as i64, s.len() as i64);
        let bound = density_upper_bound(sh, s, kappa);
        if live > bound {
            out.push(DensityViolation { subset: s.clone(), live, bound, missing_edges: 0 });
        }
    }
    out
}

/// Whole-graph bound: `den_live(V) ≤ (κ+1)·den_shadow(V) + κ/2`, with the
/// shadow density taken over the subgraph induced on alive nodes.
pub fn check_graph_density_upper(g: &ColoredGraph, sh: &ShadowGraph, kappa: usize) -> Option<DensityViolation> {
    let alive: BTreeSet<NodeId> = g.nodes().collect();
    if alive.is_empty() {
        return None;
    }
    let n = alive.len() as i64;
    let k = kappa as i64;
    let live = Rational64::new(g.edge_count() as i64, n);
    let shadow = Rational64::new(induced_edge_count(sh, &alive) as i64, n);
    let bound = Rational64::from_integer(k + 1) * shadow + Rational64::new(k, 2);
    (live > bound).then_some(DensityViolation { subset: alive, live, bound, missing_edges: 0 })
}

pub fn check_density_upper<R: Rng + ?Sized>(
    g: &ColoredGraph,
    sh: &ShadowGraph,
    kappa: usize,
    samples: usize,
    rng: &mut R,
) -> Vec<DensityViolation> {
    let mut out = check_density_upper_on(g, sh, kappa, &sample_subsets(g, samples, rng));
    out.extend(check_graph_density_upper(g, sh, kappa));
    out
}

fn indexed<G: GraphView + ?Sized>(view: &G) -> (usize, Vec<(usize, usize)>) {
    let nodes = view.node_ids();
    let pos: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut edges = Vec::new();
    for (i, &v) in nodes.iter().enumerate() {
        for u in view.neighbors_of(v) {
            let j = pos[&u];
            if i < j {
                edges.push((i, j));
            }
        }
    }
    (nodes.len(), edges)
}

/// Exact edge expansion of a view over its own node set.
pub fn expansion<G: GraphView + ?Sized>(view: &G, limit: usize) -> Result<Rational64, ExpanderError> {
    let (n, edges) = indexed(view);
    expander::expansion_exact(n, &edges, limit)
}

/// Second smallest eigenvalue of the combinatorial Laplacian.
pub fn lambda2(n: usize, edges: &[(usize, usize)], cap: usize) -> Result<f64, SpectralError> {
    if n < 2 {
        return Err(SpectralError::TooSmall);
    }
    if n > cap {
        return Err(SpectralError::TooLarge { n, cap });
    }
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for &(a, b) in edges {
        if a == b {
            continue;
        }
        lap[(a, b)] -= 1.0;
        lap[(b, a)] -= 1.0;
        lap[(a, a)] += 1.0;
        lap[(b, b)] += 1.0;
    }
    let eig = SymmetricEigen::try_new(lap, EIGEN_TOLERANCE, 0).ok_or(SpectralError::NoConvergence)?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    Ok(values[1])
}

pub fn lambda2_view<G: GraphView + ?Sized>(view: &G, cap: usize) -> Result<f64, SpectralError> {
    let (n, edges) = indexed(view);
    lambda2(n, &edges, cap)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StretchCheck {
    /// Largest live/shadow distance ratio among checked pairs.
    pub max: Option<Rational64>,
    pub pairs_checked: usize,
    /// Pairs connected in the shadow but not in the live graph.
    pub disconnected: Vec<(NodeId, NodeId)>,
}

/// Node count up to which every pair is checked.
pub const ALL_PAIRS_LIMIT: usize = 60;

/// Ratio of live to shadow shortest-path distance. Shadow distances use the
/// full shadow, so deleted nodes serve as intermediate hops.
pub fn stretch<R: Rng + ?Sized>(g: &ColoredGraph, sh: &ShadowGraph, pair_samples: usize, rng: &mut R) -> StretchCheck {
    let nodes: Vec<NodeId> = g.nodes().collect();
    let mut pairs: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    if nodes.len() <= ALL_PAIRS_LIMIT {
        for (i, &u) in nodes.iter().enumerate() {
            pairs.entry(u).or_default().extend(&nodes[i + 1..]);
        }
    } else {
        for _ in 0..pair_samples {
            let pick: Vec<NodeId> = nodes.choose_multiple(rng, 2).copied().collect();
            pairs.entry(pick[0]).or_default().push(pick[1]);
        }
    }
    let mut out = StretchCheck::default();
    for (u, targets) in pairs {
        let live = bfs_distances(g, u);
        let shadow = bfs_distances(sh, u);
        for v in targets {
            let Some(&ds) = shadow.get(&v) else {
                continue;
            };
            out.pairs_checked += 1;
            match live.get(&v) {
                Some(&dl) => {
                    let r = Rational64::new(dl as i64, ds as i64);
                    out.max = Some(out.max.map_or(r, |m| m.max(r)));
                }
                None => out.disconnected.push((u, v)),
            }
        }
    }
    out
}

/// `c · ⌈log₂ n⌉`, the stretch gate for `n` live nodes.
pub fn stretch_bound(n: usize, constant: u64) -> u64 {
    if n <= 1 {
        return 0;
    }
    constant * u64::from(usize::BITS - (n - 1).leading_zeros())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectivityVerdict {
    Pass,
    /// The shadow itself is disconnected, so nothing is claimed.
    Vacuous,
    Fail,
}

impl ConnectivityVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            ConnectivityVerdict::Pass => "pass",
            ConnectivityVerdict::Vacuous => "vacuous",
            ConnectivityVerdict::Fail => "fail",
        }
    }
}

pub fn check_connectivity(g: &ColoredGraph, sh: &ShadowGraph) -> ConnectivityVerdict {
    if !is_connected(sh) {
        ConnectivityVerdict::Vacuous
    } else if is_connected(g) {
        ConnectivityVerdict::Pass
    } else {
        ConnectivityVerdict::Fail
    }
}

/// A metric that was either computed or deliberately skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measured<T> {
    Value(T),
    Skipped(String),
}

impl<T: Copy> Measured<T> {
    pub fn value(&self) -> Option<T> {
        match self {
            Measured::Value(v) => Some(*v),
            Measured::Skipped(_) => None,
        }
    }
}

/// Every metric and verdict at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub t: u64,
    pub n_alive: usize,
    pub connected_shadow: bool,
    pub connected_live: bool,
    pub connectivity: ConnectivityVerdict,
    pub max_degree_ratio_slack: Option<Rational64>,
    pub degree_violations: usize,
    pub density_subsets: usize,
    pub density_violations: usize,
    pub density_ub_violations: usize,
    pub expansion_live: Measured<Rational64>,
    pub expansion_shadow: Measured<Rational64>,
    /// `h(live) ≥ min(α, h(shadow))`; `None` when either side was skipped.
    pub expansion_ok: Option<bool>,
    pub lambda2_live: Measured<f64>,
    pub max_stretch: Option<Rational64>,
    pub stretch_bound: u64,
    pub stretch_ok: bool,
    pub edge_preservation_ok: bool,
    pub coherence_ok: bool,
    pub counters: RepairCounters,
}

impl MetricsReport {
    /// True when no verdict in the row failed.
    pub fn passes(&self) -> bool {
        self.connectivity != ConnectivityVerdict::Fail
            && self.degree_violations == 0
            && self.density_violations == 0
            && self.density_ub_violations == 0
            && self.expansion_ok != Some(false)
            && self.stretch_ok
            && self.edge_preservation_ok
            && self.coherence_ok
    }
}
