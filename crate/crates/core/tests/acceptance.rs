//! Acceptance gate. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xheal_core::adversary::{gen_trace, Strategy, StrategyKind};
use xheal_core::engine::{EngineConfig, Fault, RepairCounters};
use xheal_core::expander::{build_topology, expansion_exact, ExpanderConfig};
use xheal_core::graph::{density, ColoredGraph, NodeId};
use xheal_core::metrics::{lambda2, SPECTRAL_CAP};
use xheal_core::report::to_csv;
use xheal_core::sim::{run_strategy, run_trace, CheckKind, SimConfig, SimOutcome};

struct Gate {
    failures: usize,
}

impl Gate {
    fn record(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failures += 1;
        }
    }
}

fn config(seed: u64) -> SimConfig {
    SimConfig::new(EngineConfig::new(ExpanderConfig::default(), seed))
}

fn count(outcomes: &[SimOutcome], check: CheckKind) -> usize {
    outcomes.iter().flat_map(|o| &o.violations).filter(|v| v.check == check).count()
}

fn first(outcomes: &[SimOutcome], check: CheckKind) -> String {
    outcomes
        .iter()
        .flat_map(|o| &o.violations)
        .find(|v| v.check == check)
        .map(|v| format!("; first: {v}"))
        .unwrap_or_default()
}

fn uniform_runs() -> (Vec<SimOutcome>, Duration) {
    let start = Instant::now();
    let s = Strategy::new(StrategyKind::Uniform).with_insert_fraction(Rational64::new(2, 5));
    let runs = (0..10)
        .map(|seed| {
            let trace = gen_trace(&s, 6, 50, 300, seed).expect("trace");
            run_trace(config(seed), &trace).expect("run")
        })
        .collect();
    (runs, start.elapsed())
}

fn bridge_runs() -> Vec<SimOutcome> {
    let s = Strategy::new(StrategyKind::TargetBridge).with_insert_fraction(Rational64::new(1, 2));
    (100..105).map(|seed| run_strategy(config(seed), &s, 40, 200).expect("run")).collect()
}

/// Uniform traces that keep the network populated, so no insertion is isolated.
fn steady_runs() -> Vec<SimOutcome> {
    let s = Strategy::new(StrategyKind::Uniform).with_insert_fraction(Rational64::new(3, 5));
    (300..310)
        .map(|seed| {
            let trace = gen_trace(&s, 6, 50, 300, seed).expect("trace");
            run_trace(config(seed), &trace).expect("run")
        })
        .collect()
}

fn isolated_insertions(outcomes: &[SimOutcome]) -> usize {
    outcomes
        .iter()
        .flat_map(|o| &o.trace.events)
        .filter(|e| matches!(e, xheal_core::Event::Insert { neighbors, .. } if neighbors.is_empty()))
        .count()
}

fn vacuous(outcomes: &[SimOutcome]) -> usize {
    outcomes
        .iter()
        .flat_map(|o| &o.reports)
        .filter(|r| r.connectivity == xheal_core::metrics::ConnectivityVerdict::Vacuous)
        .count()
}

/// Small traces whose shadow graphs stay within exact-enumeration reach.
fn expansion_runs() -> (Vec<SimOutcome>, Duration, usize, usize) {
    let start = Instant::now();
    let s = Strategy::new(StrategyKind::Uniform).with_insert_fraction(Rational64::new(2, 5));
    let mut runs = Vec::new();
    let mut max_alive = 0;
    let mut max_shadow = 0;
    for seed in 200..210 {
        let trace = gen_trace(&s, 6, 10, 40, seed).expect("trace");
        let mut cfg = config(seed);
        cfg.exact_limit = 40;
        cfg.checkpoint_every = 1;
        let out = run_trace(cfg, &trace).expect("run");
        let mut alive = trace.initial.nodes.len();
        for e in &trace.events {
            alive = match e {
                xheal_core::Event::Insert { .. } => alive + 1,
                xheal_core::Event::Delete { .. } => alive - 1,
            };
            max_alive = max_alive.max(alive);
        }
        max_shadow = max_shadow.max(out.state.shadow().node_count());
        runs.push(out);
    }
    (runs, start.elapsed(), max_alive, max_shadow)
}

/// Edge expansion by direct enumeration of every subset of size at most n/2.
fn brute_expansion(n: usize, edges: &[(usize, usize)]) -> Rational64 {
    let mut best: Option<Rational64> = None;
    for mask in 1u64..(1u64 << n) {
        let size = mask.count_ones() as i64;
        if size as usize > n / 2 {
            continue;
        }
        let cut = edges.iter().filter(|&&(a, b)| ((mask >> a) & 1) != ((mask >> b) & 1)).count() as i64;
        let h = Rational64::new(cut, size);
        best = Some(best.map_or(h, |b| b.min(h)));
    }
    best.expect("n >= 2")
}

fn random_graph(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(p) {
                edges.push((a, b));
            }
        }
    }
    edges
}

fn builder(gate: &mut Gate, totals: &mut RepairCounters) {
    let cfg = ExpanderConfig::default();
    let mut bad = Vec::new();
    let mut uncertified = 0;
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let n = rng.random_range(8..=40usize);
        let members: Vec<NodeId> = (0..n as u64).map(NodeId).collect();
        let topo = match build_topology(&members, &cfg, &mut rng) {
            Ok(t) => t,
            Err(e) => {
                uncertified += 1;
                bad.push(format!("build {i} (n={n}): {e}"));
                continue;
            }
        };
        let edges: Vec<(usize, usize)> = topo.edges.iter().map(|e| (e.lo().0 as usize, e.hi().0 as usize)).collect();
        let distinct: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
        let simple = distinct.len() == edges.len() && edges.iter().all(|&(a, b)| a != b && a < n && b < n);
        let mut deg = vec![0usize; n];
        for &(a, b) in &edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        let degree_ok = deg.iter().all(|&d| d + 1 >= cfg.kappa && d <= cfg.kappa + 1);
        let mut g = ColoredGraph::new();
        for &m in &members {
            g.add_node(m).unwrap();
        }
        for &(a, b) in &edges {
            g.add_black_edge(NodeId(a as u64), NodeId(b as u64)).unwrap();
        }
        let connected = xheal_core::graph::is_connected(&g);
        let certified = if n <= 20 {
            brute_expansion(n, &edges) >= Rational64::from_integer(1)
        } else {
            lambda2(n, &edges, SPECTRAL_CAP).unwrap() / 2.0 >= 1.0
        };
        if !(simple && degree_ok && connected && certified) {
            bad.push(format!(
                "build {i} (n={n}): simple={simple} degree={degree_ok} connected={connected} certified={certified}"
            ));
        }
    }
    totals.uncertified_builds += uncertified;
    gate.record(
        "expander-builder",
        bad.is_empty(),
        format!(
            "100 builds, n in [8,40], {} bad{}",
            bad.len(),
            bad.first().map(|b| format!("; first: {b}")).unwrap_or_default()
        ),
    );
}

fn oracles(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    for _ in 0..50 {
        let n = rng.random_range(2..=10usize);
        let edges = random_graph(n, rng.random_range(0.2..0.8), &mut rng);
        if expansion_exact(n, &edges, 20).unwrap() != brute_expansion(n, &edges) {
            mismatches += 1;
        }
    }
    gate.record("oracle-expansion", mismatches == 0, format!("50 random graphs n<=10, {mismatches} mismatches"));

    let mut worst: f64 = 0.0;
    for n in 2..=12usize {
        let complete: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        worst = worst.max((lambda2(n, &complete, SPECTRAL_CAP).unwrap() - n as f64).abs());
        if n >= 3 {
            let cycle: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
            let expected = 2.0 - 2.0 * (2.0 * std::f64::consts::PI / n as f64).cos();
            worst = worst.max((lambda2(n, &cycle, SPECTRAL_CAP).unwrap() - expected).abs());
        }
    }
    gate.record("oracle-lambda2", worst < 1e-6, format!("K_n and C_n for n<=12, max error {worst:.2e}"));

    let mut mismatches = 0;
    let mut subsets = 0u64;
    for _ in 0..20 {
        let n = rng.random_range(1..=12usize);
        let edges = random_graph(n, rng.random_range(0.1..0.9), &mut rng);
        let mut g = ColoredGraph::new();
        for v in 0..n as u64 {
            g.add_node(NodeId(v)).unwrap();
        }
        for &(a, b) in &edges {
            g.add_black_edge(NodeId(a as u64), NodeId(b as u64)).unwrap();
        }
        for mask in 1u64..(1u64 << n) {
            let s: BTreeSet<NodeId> = (0..n as u64).filter(|i| (mask >> i) & 1 == 1).map(NodeId).collect();
            let mut inside = 0i64;
            for a in 0..n {
                for b in a + 1..n {
                    if (mask >> a) & 1 == 1 && (mask >> b) & 1 == 1 && edges.contains(&(a, b)) {
                        inside += 1;
                    }
                }
            }
            subsets += 1;
            if density(&g, &s).unwrap() != Rational64::new(inside, s.len() as i64) {
                mismatches += 1;
            }
        }
    }
    gate.record(
        "oracle-density",
        mismatches == 0,
        format!("{subsets} subsets over 20 graphs n<=12, {mismatches} mismatches"),
    );
}

fn main() -> ExitCode {
    let mut gate = Gate { failures: 0 };
    let mut totals = RepairCounters::default();

    let (uniform, uniform_time) = uniform_runs();
    let bridge = bridge_runs();
    let steady = steady_runs();
    let (small, small_time, max_alive, max_shadow) = expansion_runs();
    let all: Vec<&SimOutcome> = uniform.iter().chain(&bridge).chain(&steady).chain(&small).collect();
    for o in &all {
        totals.add(o.state.counters());
    }
    let standard_and_bridge: Vec<SimOutcome> = uniform.iter().chain(&bridge).cloned().collect();

    let v = count(&uniform, CheckKind::EdgePreservation);
    gate.record(
        "edge-preservation",
        v == 0 && uniform_time < Duration::from_secs(60),
        format!(
            "10 uniform runs n0=50 T=300, checked after every event, {v} violations, {:.1}s{}",
            uniform_time.as_secs_f64(),
            first(&uniform, CheckKind::EdgePreservation)
        ),
    );

    let v = count(&standard_and_bridge, CheckKind::DegreeBound);
    gate.record(
        "degree-bound",
        v == 0,
        format!(
            "10 uniform + 5 target-bridge runs, {v} violations{}",
            first(&standard_and_bridge, CheckKind::DegreeBound)
        ),
    );

    let checkpoints: usize = standard_and_bridge.iter().map(|o| o.reports.len()).sum();
    let subsets: usize = standard_and_bridge.iter().flat_map(|o| &o.reports).map(|r| r.density_subsets).sum();
    let v = count(&standard_and_bridge, CheckKind::DensityLower);
    gate.record(
        "density-lower",
        v == 0,
        format!(
            "{checkpoints} checkpoints, {subsets} subsets, {v} violations{}",
            first(&standard_and_bridge, CheckKind::DensityLower)
        ),
    );
    let v = count(&standard_and_bridge, CheckKind::DensityUpper);
    gate.record(
        "density-upper",
        v == 0,
        format!(
            "{checkpoints} checkpoints, subset and whole-graph bounds, {v} violations{}",
            first(&standard_and_bridge, CheckKind::DensityUpper)
        ),
    );

    let connected_suite: Vec<SimOutcome> = steady.iter().chain(&bridge).cloned().collect();
    let isolated = isolated_insertions(&connected_suite);
    let v_suite = count(&connected_suite, CheckKind::Connectivity);
    let owned_all: Vec<SimOutcome> = all.iter().map(|o| (*o).clone()).collect();
    let v_all = count(&owned_all, CheckKind::Connectivity);
    gate.record(
        "connectivity",
        v_suite == 0 && v_all == 0 && isolated == 0 && vacuous(&connected_suite) == 0,
        format!(
            "10 steady uniform + 5 target-bridge runs, checked after every event, {isolated} isolated insertions, {} vacuous checkpoints, {v_suite} violations; {v_all} violations across all suites ({} vacuous checkpoints in drained standard runs){}",
            vacuous(&connected_suite),
            vacuous(&uniform),
            first(&owned_all, CheckKind::Connectivity)
        ),
    );

    let skipped = small.iter().flat_map(|o| &o.reports).filter(|r| r.n_alive >= 2 && r.expansion_ok.is_none()).count();
    let evaluated = small.iter().flat_map(|o| &o.reports).filter(|r| r.expansion_ok.is_some()).count();
    let v = count(&small, CheckKind::Expansion);
    gate.record(
        "expansion",
        v == 0 && skipped == 0 && max_alive <= 16 && small_time < Duration::from_secs(120),
        format!(
            "10 runs n0=10 T=40, {evaluated} exact checkpoints, {skipped} skipped, max alive {max_alive}, max shadow {max_shadow}, {v} violations, {:.1}s{}",
            small_time.as_secs_f64(),
            first(&small, CheckKind::Expansion)
        ),
    );

    let v = count(&uniform, CheckKind::Stretch);
    let worst = uniform.iter().flat_map(|o| &o.reports).filter_map(|r| r.max_stretch).max();
    gate.record(
        "stretch",
        v == 0,
        format!(
            "bound 4*ceil(log2 n), max stretch {}, {v} violations{}",
            worst.map_or("n/a".into(), |m| m.to_string()),
            first(&uniform, CheckKind::Stretch)
        ),
    );

    builder(&mut gate, &mut totals);
    oracles(&mut gate);

    let owned: Vec<SimOutcome> = all.iter().map(|o| (*o).clone()).collect();
    let v = count(&owned, CheckKind::Coherence);
    let again = uniform_runs().0;
    let identical = uniform.iter().zip(&again).all(|(a, b)| to_csv(&a.reports) == to_csv(&b.reports));
    let bridge_again = bridge_runs();
    let identical =
        identical && bridge.iter().zip(&bridge_again).all(|(a, b)| to_csv(&a.reports) == to_csv(&b.reports));
    gate.record(
        "coherence-determinism",
        v == 0 && identical,
        format!(
            "{v} coherence mismatches across all suites, reports byte-identical on rerun: {identical}{}",
            first(&owned, CheckKind::Coherence)
        ),
    );

    let s = Strategy::new(StrategyKind::Uniform);
    let trace = gen_trace(&s, 6, 20, 50, 5).expect("trace");
    let mut detected = Vec::new();
    for fault in [Fault::SkipHeal, Fault::DropBlackEdge] {
        let mut cfg = config(5);
        cfg.engine.fault = Some(fault);
        let out = run_trace(cfg, &trace).expect("run");
        let kinds: BTreeSet<&str> = out.violations.iter().map(|v| v.check.name()).collect();
        detected.push((fault, !out.passed(), kinds));
    }
    let clean = run_trace(config(5), &trace).expect("run").passed();
    gate.record(
        "fault-sensitivity",
        clean && detected.iter().all(|d| d.1),
        format!(
            "clean run passes: {clean}; {}",
            detected.iter().map(|(f, hit, k)| format!("{f:?} detected={hit} by {k:?}")).collect::<Vec<_>>().join("; ")
        ),
    );

    let paths = [
        ("all-black", totals.branch_all_black),
        ("primary", totals.branch_primary),
        ("secondary", totals.branch_secondary),
        ("merge", totals.merges),
        ("borrow", totals.free_borrowed),
        ("null", totals.free_null),
    ];
    gate.record(
        "branch-coverage",
        paths.iter().all(|p| p.1 > 0),
        format!(
            "{} (uncertified builds: {})",
            paths.iter().map(|(n, c)| format!("{n}={c}")).collect::<Vec<_>>().join(" "),
            totals.uncertified_builds
        ),
    );

    println!("{} criteria failed", gate.failures);
    if gate.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
