//! Cloud topologies: cliques for small member sets, seeded random κ-regular
//! expanders otherwise, each carrying an expansion certificate.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Rational64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EdgeKey, NodeId};
use crate::metrics;

/// Pairing restarts allowed per candidate before the candidate counts as failed.
const PAIRING_RESTARTS: usize = 2_000;

/// Largest graph the bitmask enumerator accepts, whatever the configured limit.
const BITMASK_LIMIT: usize = 63;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpanderConfig {
    pub kappa: usize,
    #[serde(with = "crate::ratio_serde")]
    pub alpha_target: Rational64,
    pub exact_limit: usize,
    pub max_retries: u32,
}

impl Default for ExpanderConfig {
    fn default() -> Self {
        ExpanderConfig { kappa: 6, alpha_target: Rational64::from_integer(1), exact_limit: 20, max_retries: 64 }
    }
}

impl ExpanderConfig {
    pub fn validate(&self) -> Result<(), ExpanderError> {
        if self.kappa < 4 || !self.kappa.is_multiple_of(2) {
            return Err(ExpanderError::InvalidConfig(format!("kappa must be even and at least 4, got {}", self.kappa)));
        }
        if self.alpha_target <= Rational64::from_integer(0) {
            return Err(ExpanderError::InvalidConfig("alpha_target must be positive".into()));
        }
        if self.max_retries == 0 {
            return Err(ExpanderError::InvalidConfig("max_retries must be positive".into()));
        }
        if self.exact_limit < 2 || self.exact_limit > BITMASK_LIMIT {
            return Err(ExpanderError::InvalidConfig(format!("exact_limit must lie in [2, {BITMASK_LIMIT}]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopologyKind {
    Clique,
    RegularExpander,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CertificateSource {
    /// Brute-force edge expansion.
    Exact,
    /// Cheeger lower bound λ₂/2, rounded down.
    Spectral,
}

/// A lower bound on the edge expansion of a topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    #[serde(with = "crate::ratio_serde")]
    pub value: Rational64,
    pub source: CertificateSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudTopology {
    pub kind: TopologyKind,
    pub members: Vec<NodeId>,
    pub edges: Vec<EdgeKey>,
    pub kappa: usize,
    /// `None` for fewer than two members.
    pub certificate: Option<Certificate>,
}

impl CloudTopology {
    pub fn empty(members: Vec<NodeId>, kappa: usize) -> Self {
        CloudTopology { kind: TopologyKind::Clique, members, edges: Vec::new(), kappa, certificate: None }
    }

    /// Degree of every member inside this topology.
    pub fn degrees(&self) -> BTreeMap<NodeId, usize> {
        let mut deg: BTreeMap<NodeId, usize> = self.members.iter().map(|&m| (m, 0)).collect();
        for e in &self.edges {
            *deg.entry(e.lo()).or_default() += 1;
            *deg.entry(e.hi()).or_default() += 1;
        }
        deg
    }

    /// Drops `v` and its incident edges.
    pub fn prune(&mut self, v: NodeId) {
        self.members.retain(|&m| m != v);
        self.edges.retain(|e| !e.touches(v));
    }

    fn index_edges(&self) -> Vec<(usize, usize)> {
        let pos: BTreeMap<NodeId, usize> = self.members.iter().enumerate().map(|(i, &m)| (m, i)).collect();
        self.edges.iter().map(|e| (pos[&e.lo()], pos[&e.hi()])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExpanderError {
    #[error("invalid expander config: {0}")]
    InvalidConfig(String),
    #[error("no candidate certified after {attempts} attempts")]
    RetriesExhausted {
        attempts: u32,
        /// Best connected candidate seen, if any.
        best: Option<Box<CloudTopology>>,
    },
    #[error("{n} nodes exceeds the exact expansion limit {limit}")]
    TooLarge { n: usize, limit: usize },
    #[error("expansion of a graph with fewer than two nodes is undefined")]
    ZeroNodes,
    #[error("duplicate member {0}")]
    DuplicateMember(NodeId),
    #[error(transparent)]
    Spectral(#[from] metrics::SpectralError),
}

/// Exact edge expansion: minimum over non-empty `S` with `|S| ≤ n/2` of
/// crossing edges divided by `|S|`.
///
/// Enumerates subsets of the first `n-1` vertices in Gray-code order and
/// reads each subset together with its complement.
pub fn expansion_exact(n: usize, edges: &[(usize, usize)], limit: usize) -> Result<Rational64, ExpanderError> {
    if n < 2 {
        return Err(ExpanderError::ZeroNodes);
    }
    let limit = limit.min(BITMASK_LIMIT);
    if n > limit {
        return Err(ExpanderError::TooLarge { n, limit });
    }
    let mut adj = vec![0u64; n];
    for &(a, b) in edges {
        if a != b {
            adj[a] |= 1 << b;
            adj[b] |= 1 << a;
        }
    }
    let half = n / 2;
    let mut best = vec![i64::MAX; half + 1];
    let (mut set, mut size, mut cut) = (0u64, 0usize, 0i64);
    for i in 1u64..(1u64 << (n - 1)) {
        let b = i.trailing_zeros() as usize;
        let bit = 1u64 << b;
        let delta = adj[b].count_ones() as i64 - 2 * (adj[b] & set).count_ones() as i64;
        if set & bit == 0 {
            set |= bit;
            size += 1;
            cut += delta;
        } else {
            set &= !bit;
            size -= 1;
            cut -= delta;
        }
        if (1..=half).contains(&size) {
            best[size] = best[size].min(cut);
        }
        let rest = n - size;
        if rest <= half {
            best[rest] = best[rest].min(cut);
        }
    }
    let min = (1..=half)
        .filter(|&s| best[s] != i64::MAX)
        .map(|s| Rational64::new(best[s], s as i64))
        .min()
        .expect("every size up to n/2 is reachable");
    Ok(min)
}

/// Certifies the expansion of `t`: exact below `exact_limit`, spectral above.
pub fn verify_cloud(t: &CloudTopology, cfg: &ExpanderConfig) -> Result<Option<Certificate>, ExpanderError> {
    let n = t.members.len();
    if n < 2 {
        return Ok(None);
    }
    let edges = t.index_edges();
    if n <= cfg.exact_limit {
        let value = expansion_exact(n, &edges, cfg.exact_limit)?;
        return Ok(Some(Certificate { value, source: CertificateSource::Exact }));
    }
    let lambda2 = metrics::lambda2(n, &edges, usize::MAX)?;
    Ok(Some(Certificate { value: spectral_lower_bound(lambda2), source: CertificateSource::Spectral }))
}

/// Rational just below λ₂/2, allowing for the eigensolver tolerance.
fn spectral_lower_bound(lambda2: f64) -> Rational64 {
    const SCALE: i64 = 1_000_000;
    let half = ((lambda2 - metrics::EIGEN_TOLERANCE) / 2.0).max(0.0);
    Rational64::new((half * SCALE as f64).floor() as i64, SCALE)
}

/// Builds the topology for `members`: a clique when `|members| ≤ κ+1`,
/// otherwise a simple connected κ-regular graph whose certificate reaches
/// `alpha_target`. Deterministic for a fixed rng state.
pub fn build_topology<R: Rng + ?Sized>(
    members: &[NodeId],
    cfg: &ExpanderConfig,
    rng: &mut R,
) -> Result<CloudTopology, ExpanderError> {
    cfg.validate()?;
    let mut seen = BTreeSet::new();
    if let Some(&dup) = members.iter().find(|&&m| !seen.insert(m)) {
        return Err(ExpanderError::DuplicateMember(dup));
    }
    let n = members.len();
    if n <= cfg.kappa + 1 {
        let mut edges = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                edges.push(EdgeKey::new(members[i], members[j]));
            }
        }
        let mut t = CloudTopology {
            kind: TopologyKind::Clique,
            members: members.to_vec(),
            edges,
            kappa: cfg.kappa,
            certificate: None,
        };
        t.certificate = verify_cloud(&t, cfg)?;
        return Ok(t);
    }

    let mut best: Option<CloudTopology> = None;
    for _ in 0..cfg.max_retries {
        let Some(pairs) = sample_regular(n, cfg.kappa, rng) else {
            continue;
        };
        if !index_connected(n, &pairs) {
            continue;
        }
        let mut t = CloudTopology {
            kind: TopologyKind::RegularExpander,
            members: members.to_vec(),
            edges: pairs.iter().map(|&(a, b)| EdgeKey::new(members[a], members[b])).collect(),
            kappa: cfg.kappa,
            certificate: None,
        };
        t.certificate = verify_cloud(&t, cfg)?;
        let value = t.certificate.map(|c| c.value).unwrap_or_default();
        if value >= cfg.alpha_target {
            return Ok(t);
        }
        if best.as_ref().is_none_or(|b| b.certificate.map(|c| c.value).unwrap_or_default() < value) {
            best = Some(t);
        }
    }
    Err(ExpanderError::RetriesExhausted { attempts: cfg.max_retries, best: best.map(Box::new) })
}

/// Deterministic connected κ-regular circulant: member `i` links to
/// `i±1, …, i±κ/2`. Requires more than κ+1 members.
pub fn circulant_topology(members: &[NodeId], cfg: &ExpanderConfig) -> Result<CloudTopology, ExpanderError> {
    let n = members.len();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        for step in 1..=cfg.kappa / 2 {
            edges.insert(EdgeKey::new(members[i], members[(i + step) % n]));
        }
    }
    let mut t = CloudTopology {
        kind: TopologyKind::RegularExpander,
        members: members.to_vec(),
        edges: edges.into_iter().collect(),
        kappa: cfg.kappa,
        certificate: None,
    };
    t.certificate = verify_cloud(&t, cfg)?;
    Ok(t)
}

/// One draw from the pairing model with incremental rejection: stubs are
/// shuffled and paired, clashing pairs are returned to the pool and redrawn,
/// and the draw restarts when no admissible pair remains.
fn sample_regular<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Option<Vec<(usize, usize)>> {
    'restart: for _ in 0..PAIRING_RESTARTS {
        let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
        let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, d)).collect();
        while !stubs.is_empty() {
            stubs.shuffle(rng);
            let mut leftover: BTreeMap<usize, usize> = BTreeMap::new();
            for pair in stubs.chunks_exact(2) {
                let (a, b) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
                if a != b && edges.insert((a, b)) {
                    continue;
                }
                *leftover.entry(a).or_default() += 1;
                *leftover.entry(b).or_default() += 1;
            }
            if !has_admissible_pair(&edges, &leftover) {
                continue 'restart;
            }
            stubs = leftover.iter().flat_map(|(&v, &c)| std::iter::repeat_n(v, c)).collect();
        }
        return Some(edges.into_iter().collect());
    }
    None
}

fn has_admissible_pair(edges: &BTreeSet<(usize, usize)>, leftover: &BTreeMap<usize, usize>) -> bool {
    if leftover.is_empty() {
        return true;
    }
    let keys: Vec<usize> = leftover.keys().copied().collect();
    keys.iter().enumerate().any(|(i, &a)| keys[i + 1..].iter().any(|&b| !edges.contains(&(a, b))))
}

fn index_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(x) = stack.pop() {
        for &y in &adj[x] {
            if !seen[y] {
                seen[y] = true;
                count += 1;
                stack.push(y);
            }
        }
    }
    count == n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(n: u64) -> Vec<NodeId> {
        (0..n).map(|i| NodeId(i * 3 + 1)).collect()
    }

    fn cycle(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (i, (i + 1) % n)).collect()
    }

    fn complete(n: usize) -> Vec<(usize, usize)> {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    }

    #[test]
    fn small_expansions() {
        assert_eq!(expansion_exact(2, &[(0, 1)], 20).unwrap(), Rational64::from_integer(1));
        assert_eq!(expansion_exact(6, &cycle(6), 20).unwrap(), Rational64::new(2, 3));
        assert_eq!(expansion_exact(4, &complete(4), 20).unwrap(), Rational64::from_integer(2));
        assert_eq!(expansion_exact(4, &[(0, 1), (2, 3)], 20).unwrap(), Rational64::from_integer(0));
        assert_eq!(expansion_exact(1, &[], 20), Err(ExpanderError::ZeroNodes));
        assert_eq!(expansion_exact(21, &cycle(21), 20), Err(ExpanderError::TooLarge { n: 21, limit: 20 }));
    }

    #[test]
    fn clique_branch() {
        let cfg = ExpanderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = build_topology(&ids(3), &cfg, &mut rng).unwrap();
        assert_eq!(t.kind, TopologyKind::Clique);
        assert_eq!(t.edges.len(), 3);

        let t = build_topology(&ids(7), &cfg, &mut rng).unwrap();
        assert_eq!(t.kind, TopologyKind::Clique);
        assert_eq!(t.edges.len(), 21);

        let t = build_topology(&ids(1), &cfg, &mut rng).unwrap();
        assert!(t.edges.is_empty());
        assert!(t.certificate.is_none());

        let t = build_topology(&ids(4), &cfg, &mut rng).unwrap();
        assert_eq!(t.certificate.unwrap().value, Rational64::from_integer(2));
        let t = build_topology(&ids(2), &cfg, &mut rng).unwrap();
        assert_eq!(t.certificate.unwrap().value, Rational64::from_integer(1));
    }

    #[test]
    fn expander_branch_is_regular() {
        let cfg = ExpanderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = build_topology(&ids(20), &cfg, &mut rng).unwrap();
        assert_eq!(t.kind, TopologyKind::RegularExpander);
        assert_eq!(t.edges.len(), 60);
        assert!(t.degrees().values().all(|&d| d == 6));
        assert!(t.certificate.unwrap().value >= cfg.alpha_target);

        let t = build_topology(&ids(8), &cfg, &mut rng).unwrap();
        assert_eq!(t.kind, TopologyKind::RegularExpander);
        assert_eq!(t.edges.len(), 24);
    }

    #[test]
    fn cycle_candidate_is_rejected() {
        let cfg = ExpanderConfig::default();
        let members = ids(6);
        let t = CloudTopology {
            kind: TopologyKind::RegularExpander,
            edges: cycle(6).into_iter().map(|(a, b)| EdgeKey::new(members[a], members[b])).collect(),
            members,
            kappa: 2,
            certificate: None,
        };
        let cert = verify_cloud(&t, &cfg).unwrap().unwrap();
        assert_eq!(cert.value, Rational64::new(2, 3));
        assert!(cert.value < cfg.alpha_target);
    }

    #[test]
    fn unreachable_target_exhausts_retries() {
        let cfg = ExpanderConfig { alpha_target: Rational64::from_integer(50), max_retries: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        match build_topology(&ids(12), &cfg, &mut rng) {
            Err(ExpanderError::RetriesExhausted { attempts: 3, best: Some(best) }) => {
                assert_eq!(best.edges.len(), 36);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = ExpanderConfig { kappa: 5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(ExpanderError::InvalidConfig(_))));
        let bad = ExpanderConfig { kappa: 2, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ExpanderConfig { alpha_target: Rational64::from_integer(0), ..Default::default() };
        assert!(bad.validate().is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            build_topology(&[NodeId(1), NodeId(1)], &ExpanderConfig::default(), &mut rng),
            Err(ExpanderError::DuplicateMember(NodeId(1)))
        );
    }

    #[test]
    fn circulant_is_regular_and_connected() {
        let cfg = ExpanderConfig::default();
        let t = circulant_topology(&ids(30), &cfg).unwrap();
        assert!(t.degrees().values().all(|&d| d == 6));
        assert!(index_connected(30, &t.index_edges()));
    }
}
