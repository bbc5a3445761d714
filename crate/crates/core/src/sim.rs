//! Trace replay with per-event invariant checks and periodic full metrics.

use std::collections::BTreeSet;
use std::fmt;

use num_rational::Rational64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adversary::{self, AdversaryError, Event, InitialGraph, Strategy, Trace};
use crate::engine::{EngineConfig, EngineError, HealerState};
use crate::expander::ExpanderError;
use crate::graph::{is_connected, NodeId};
use crate::metrics::{self, ConnectivityVerdict, Measured, MetricsReport};

/// Stream reserved for metric sampling so it never collides with cloud builds.
const METRIC_STREAM: u64 = u64::MAX;
/// Stream used by online adversaries after the initial graph is drawn.
const ADVERSARY_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub engine: EngineConfig,
    pub checkpoint_every: u64,
    pub density_samples: usize,
    pub stretch_pairs: usize,
    pub stretch_constant: u64,
    /// Node limit for exact expansion of the live and shadow graphs.
    pub exact_limit: usize,
    pub spectral_cap: usize,
}

impl SimConfig {
    pub fn new(engine: EngineConfig) -> Self {
        SimConfig {
            exact_limit: engine.expander.exact_limit,
            engine,
            checkpoint_every: 10,
            density_samples: 100,
            stretch_pairs: 200,
            stretch_constant: 4,
            spectral_cap: metrics::SPECTRAL_CAP,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.engine.expander.validate().map_err(EngineError::Expander)?;
        let bad = |what: &str| Err(SimError::InvalidConfig(format!("{what} must be positive")));
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every");
        }
        if self.stretch_constant == 0 {
            return bad("stretch_constant");
        }
        if self.exact_limit < 2 || self.exact_limit > 63 {
            return Err(SimError::InvalidConfig("exact_limit must lie in [2, 63]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("trace kappa {trace} differs from configured kappa {config}")]
    KappaMismatch { trace: usize, config: usize },
    #[error("event {t}: {source}")]
    Engine { t: u64, source: EngineError },
    #[error(transparent)]
    Setup(#[from] EngineError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CheckKind {
    EdgePreservation,
    DegreeBound,
    DensityLower,
    DensityUpper,
    Connectivity,
    Expansion,
    Stretch,
    Coherence,
}

impl CheckKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckKind::EdgePreservation => "edge-preservation",
            CheckKind::DegreeBound => "degree-bound",
            CheckKind::DensityLower => "density-lower",
            CheckKind::DensityUpper => "density-upper",
            CheckKind::Connectivity => "connectivity",
            CheckKind::Expansion => "expansion",
            CheckKind::Stretch => "stretch",
            CheckKind::Coherence => "coherence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub t: u64,
    pub check: CheckKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} {}: {}", self.t, self.check.name(), self.detail)
    }
}

fn fmt_set(s: &BTreeSet<NodeId>) -> String {
    let ids: Vec<String> = s.iter().map(|v| v.to_string()).collect();
    format!("{{{}}}", ids.join(","))
}

/// Checks run after every event. Returns the violations found.
pub fn event_checks(state: &HealerState) -> Vec<Violation> {
    let (g, sh, t) = (state.graph(), state.shadow(), state.time());
    let mut out = Vec::new();
    let pres = metrics::check_edge_preservation(g, sh);
    for k in pres.missing {
        out.push(Violation { t, check: CheckKind::EdgePreservation, detail: format!("black edge {k} missing") });
    }
    for (x, slack) in metrics::check_degree_bound(g, sh, state.kappa()).violations {
        out.push(Violation {
            t,
            check: CheckKind::DegreeBound,
            detail: format!("node {x} exceeds bound by {}", -slack),
        });
    }
    if metrics::check_connectivity(g, sh) == ConnectivityVerdict::Fail {
        out.push(Violation {
            t,
            check: CheckKind::Connectivity,
            detail: "shadow connected but live graph is not".into(),
        });
    }
    for msg in state.coherence_check() {
        out.push(Violation { t, check: CheckKind::Coherence, detail: msg });
    }
    out
}

/// Subsets every checkpoint always examines: all live nodes, every cloud's
/// members, and the surviving black neighbors of the last deleted node.
pub fn mandatory_subsets(state: &HealerState) -> Vec<BTreeSet<NodeId>> {
    let g = state.graph();
    let mut out = vec![g.nodes().collect::<BTreeSet<_>>()];
    out.extend(state.registry().clouds().map(|c| c.members.clone()));
    let last: BTreeSet<NodeId> = state.last_black_neighbors().iter().copied().filter(|&v| g.contains(v)).collect();
    out.push(last);
    out.retain(|s| !s.is_empty());
    out
}

fn measure_expansion<G: crate::graph::GraphView + ?Sized>(view: &G, limit: usize) -> Measured<Rational64> {
    match metrics::expansion(view, limit) {
        Ok(h) => Measured::Value(h),
        Err(ExpanderError::ZeroNodes) => Measured::Skipped("n<2".into()),
        Err(ExpanderError::TooLarge { n, limit }) => Measured::Skipped(format!("n={n}>{limit}")),
        Err(e) => Measured::Skipped(e.to_string()),
    }
}

/// Full metric evaluation of one state.
pub fn evaluate(state: &HealerState, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> (MetricsReport, Vec<Violation>) {
    let (g, sh, t) = (state.graph(), state.shadow(), state.time());
    let kappa = state.kappa();
    let mut violations = event_checks(state);
    let alpha = cfg.engine.expander.alpha_target;

    let degree = metrics::check_degree_bound(g, sh, kappa);
    let mut subsets = metrics::sample_subsets(g, cfg.density_samples, rng);
    subsets.extend(mandatory_subsets(state));

    let lower = metrics::check_density_on(g, sh, &subsets);
    for v in &lower {
        violations.push(Violation {
            t,
            check: CheckKind::DensityLower,
            detail: format!(
                "S={} live {} < shadow {} ({} edges missing)",
                fmt_set(&v.subset),
                v.live,
                v.bound,
                v.missing_edges
            ),
        });
    }
    let mut upper = metrics::check_density_upper_on(g, sh, kappa, &subsets);
    upper.extend(metrics::check_graph_density_upper(g, sh, kappa));
    for v in &upper {
        violations.push(Violation {
            t,
            check: CheckKind::DensityUpper,
            detail: format!("S={} live {} > bound {}", fmt_set(&v.subset), v.live, v.bound),
        });
    }

    let expansion_live = measure_expansion(g, cfg.exact_limit);
    let expansion_shadow = measure_expansion(sh, cfg.exact_limit);
    let expansion_ok = match (expansion_live.value(), expansion_shadow.value()) {
        (Some(hl), Some(hs)) => Some(hl >= alpha.min(hs)),
        _ => None,
    };
    if expansion_ok == Some(false) {
        violations.push(Violation {
            t,
            check: CheckKind::Expansion,
            detail: format!(
                "h(live) {} < min({}, h(shadow) {})",
                expansion_live.value().unwrap_or_default(),
                alpha,
                expansion_shadow.value().unwrap_or_default()
            ),
        });
    }
    let lambda2_live = match metrics::lambda2_view(g, cfg.spectral_cap) {
        Ok(l) => Measured::Value(l),
        Err(e) => Measured::Skipped(e.to_string()),
    };

    let st = metrics::stretch(g, sh, cfg.stretch_pairs, rng);
    let n_alive = g.node_count();
    let bound = metrics::stretch_bound(n_alive, cfg.stretch_constant);
    let stretch_ok = st.disconnected.is_empty() && st.max.is_none_or(|m| m <= Rational64::from_integer(bound as i64));
    if !stretch_ok {
        let detail = match st.max {
            Some(m) if m > Rational64::from_integer(bound as i64) => format!("max stretch {m} > {bound}"),
            _ => format!("{} shadow-connected pairs disconnected live", st.disconnected.len()),
        };
        violations.push(Violation { t, check: CheckKind::Stretch, detail });
    }

    let connectivity = metrics::check_connectivity(g, sh);
    let report = MetricsReport {
        t,
        n_alive,
        connected_shadow: is_connected(sh),
        connected_live: is_connected(g),
        connectivity,
        max_degree_ratio_slack: degree.min_slack,
        degree_violations: degree.violations.len(),
        density_subsets: subsets.len(),
        density_violations: lower.len(),
        density_ub_violations: upper.len(),
        expansion_live,
        expansion_shadow,
        expansion_ok,
        lambda2_live,
        max_stretch: st.max,
        stretch_bound: bound,
        stretch_ok,
        edge_preservation_ok: metrics::check_edge_preservation(g, sh).ok(),
        coherence_ok: state.coherence_check().is_empty(),
        counters: *state.counters(),
    };
    (report, violations)
}

/// Rng used for metric sampling in a run seeded with `seed`.
pub fn metric_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(METRIC_STREAM);
    rng
}

/// One run: a healer, its checkpoint reports and every violation seen.
pub struct Simulation {
    config: SimConfig,
    state: HealerState,
    metric_rng: ChaCha8Rng,
    reports: Vec<MetricsReport>,
    violations: Vec<Violation>,
    events: Vec<Event>,
    initial: InitialGraph,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub reports: Vec<MetricsReport>,
    pub violations: Vec<Violation>,
    pub state: HealerState,
    pub trace: Trace,
}

impl SimOutcome {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl Simulation {
    pub fn new(config: SimConfig, initial: InitialGraph) -> Result<Self, SimError> {
        config.validate()?;
        let state = HealerState::new(config.engine.clone(), &initial.nodes, &initial.edge_pairs())?;
        let metric_rng = metric_rng(config.engine.seed);
        let mut sim = Simulation {
            config,
            state,
            metric_rng,
            reports: Vec::new(),
            violations: Vec::new(),
            events: Vec::new(),
            initial,
        };
        sim.violations = event_checks(&sim.state);
        Ok(sim)
    }

    pub fn state(&self) -> &HealerState {
        &self.state
    }

    pub fn reports(&self) -> &[MetricsReport] {
        &self.reports
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    /// Applies one event, runs the per-event checks and, on checkpoint
    /// boundaries, the full metrics.
    pub fn step(&mut self, e: &Event) -> Result<(), SimError> {
        let t = self.state.time() + 1;
        self.state.handle_event(e).map_err(|source| SimError::Engine { t, source })?;
        self.events.push(e.clone());
        if t.is_multiple_of(self.config.checkpoint_every) {
            self.checkpoint();
        } else {
            let found = event_checks(&self.state);
            self.violations.extend(found);
        }
        Ok(())
    }

    fn checkpoint(&mut self) {
        let (report, found) = evaluate(&self.state, &self.config, &mut self.metric_rng);
        self.reports.push(report);
        self.violations.extend(found);
    }

    /// Closes the run with a final checkpoint at `t = T` if one is due.
    pub fn finish(mut self, header: adversary::TraceHeader) -> SimOutcome {
        if self.reports.last().is_none_or(|r| r.t != self.state.time()) {
            self.checkpoint();
        }
        SimOutcome {
            reports: self.reports,
            violations: self.violations,
            state: self.state,
            trace: Trace { header, initial: self.initial, events: self.events },
        }
    }
}

/// Replays a recorded trace.
pub fn run_trace(config: SimConfig, trace: &Trace) -> Result<SimOutcome, SimError> {
    let kappa = config.engine.expander.kappa;
    if trace.header.kappa != kappa {
        return Err(SimError::KappaMismatch { trace: trace.header.kappa, config: kappa });
    }
    let mut sim = Simulation::new(config, trace.initial.clone())?;
    for e in &trace.events {
        sim.step(e)?;
    }
    Ok(sim.finish(trace.header.clone()))
}

/// Runs a strategy from scratch. Non-adaptive strategies go through the
/// trace generator; adaptive ones pick each event against the live state.
pub fn run_strategy(config: SimConfig, strategy: &Strategy, n0: usize, steps: usize) -> Result<SimOutcome, SimError> {
    let kappa = config.engine.expander.kappa;
    let seed = config.engine.seed;
    if !strategy.kind.is_adaptive() {
        let trace = adversary::gen_trace(strategy, kappa, n0, steps, seed)?;
        return run_trace(config, &trace);
    }
    strategy.validate()?;
    if n0 == 0 {
        return Err(AdversaryError::InvalidParams("n0 must be at least 1".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = adversary::initial_graph(n0, strategy.extra_edges_per_node, &mut rng);
    rng.set_stream(ADVERSARY_STREAM);
    let mut sim = Simulation::new(config, initial)?;
    for _ in 0..steps {
        let e = adversary::next_event(strategy, sim.state(), &mut rng)?;
        sim.step(&e)?;
    }
    Ok(sim.finish(adversary::header_for(strategy, kappa, seed)))
}
