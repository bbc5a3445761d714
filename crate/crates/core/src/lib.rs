//! Edge-preserving self-healing for networks under adversarial node churn.
//!
//! The healer ([`engine::HealerState`]) repairs every node deletion by
//! rebuilding small expander "clouds" among the affected nodes, reusing
//! existing edges and never removing an original or adversary-inserted
//! (black) edge. The [`sim`] driver replays traces through the healer and
//! checks, after each event, that black edges survive, degrees stay within
//! `κ·deg' + κ`, induced densities never fall below those of the shadow
//! graph, connectivity is kept, and expansion and stretch stay bounded.

pub mod adversary;
pub mod engine;
pub mod expander;
pub mod graph;
pub mod metrics;
pub mod ratio;
pub mod report;
pub mod sim;
pub mod snapshot;

pub(crate) use ratio::serde_impl as ratio_serde;

pub use adversary::{Event, Strategy, StrategyKind, Trace};
pub use engine::{EngineConfig, Fault, HealerState, RepairCounters};
pub use expander::ExpanderConfig;
pub use graph::{CloudId, CloudKind, Color, NodeId};
pub use metrics::MetricsReport;
pub use sim::{SimConfig, SimOutcome, Simulation};
