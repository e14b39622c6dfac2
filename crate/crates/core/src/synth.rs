//! Ground-truth tree models, exact and noisy correlation matrices, and an
//! exhaustive topology oracle for small inputs.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::{CorrelationMatrix, SampleTable};
use crate::quartet::QuadOracle;
use crate::tree::{DecompTree, NodeId, NodeKind};

/// Largest leaf count the exhaustive oracle accepts.
pub const EXHAUSTIVE_MAX_N: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("need at least 3 leaves, got {0}")]
    TooFewLeaves(usize),
    #[error("correlation bounds ({0}, {1}) must satisfy 0 < lo <= hi <= 1")]
    BadBounds(f64, f64),
    #[error("negative-edge probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("noise level {0} must be non-negative")]
    BadNoise(f64),
    #[error("exhaustive search is limited to {max} leaves, got {found}")]
    TooLarge { max: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    /// Range of edge correlation magnitudes.
    pub rho_range: (f64, f64),
    pub negative_prob: f64,
    /// Range node marginals are drawn from.
    pub marginal_range: (f64, f64),
}

impl GeneratorConfig {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            rho_range: (0.3, 0.9),
            negative_prob: 0.0,
            marginal_range: (0.2, 0.8),
        }
    }

    pub fn with_rho_range(mut self, lo: f64, hi: f64) -> Self {
        self.rho_range = (lo, hi);
        self
    }

    pub fn with_negative_prob(mut self, p: f64) -> Self {
        self.negative_prob = p;
        self
    }
}

/// One directed edge of the generator with its 2×2 conditional table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeModel {
    pub parent: NodeId,
    pub child: NodeId,
    pub rho: f64,
    /// `P(child = 1 | parent = 1)`.
    pub p_given_one: f64,
    /// `P(child = 1 | parent = 0)`.
    pub p_given_zero: f64,
}

/// A tree-factored distribution over binary variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorModel {
    pub topology: DecompTree,
    /// Edges in preorder of their child.
    pub edges: Vec<EdgeModel>,
    /// `P(root = 1)`.
    pub root_prior: f64,
}

impl GeneratorModel {
    pub fn n(&self) -> usize {
        self.topology.leaf_set().len()
    }

    pub fn edge(&self, parent: NodeId, child: NodeId) -> Option<&EdgeModel> {
        self.edges.iter().find(|e| e.parent == parent && e.child == child)
    }

    /// Marginal `P(node = 1)` of every node, by forward propagation.
    pub fn marginals(&self) -> BTreeMap<NodeId, f64> {
        let mut out = BTreeMap::from([(self.topology.root(), self.root_prior)]);
        for e in &self.edges {
            let pu = out[&e.parent];
            out.insert(e.child, e.p_given_one * pu + e.p_given_zero * (1.0 - pu));
        }
        out
    }

    /// Edge correlations keyed by `(parent, child)`.
    pub fn edge_rho(&self) -> BTreeMap<(NodeId, NodeId), f64> {
        self.edges.iter().map(|e| ((e.parent, e.child), e.rho)).collect()
    }
}

/// Undirected tree over leaves `0..n` and hidden nodes `n..`.
#[derive(Clone)]
struct Unrooted {
    n: usize,
    edges: Vec<(NodeId, NodeId)>,
    next: NodeId,
}

impl Unrooted {
    fn triple(n: usize) -> Self {
        Self {
            n,
            edges: vec![(n, 0), (n, 1), (n, 2)],
            next: n + 1,
        }
    }

    /// Subdivides edge `e` with a fresh hidden node and hangs `leaf` off it.
    fn insert(&mut self, e: usize, leaf: usize) {
        let (a, b) = self.edges[e];
        let h = self.next;
        self.next += 1;
        self.edges[e] = (a, h);
        self.edges.push((h, b));
        self.edges.push((h, leaf));
    }

    fn adjacency(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for &(a, b) in &self.edges {
            adj.entry(a).or_default().push(b);
            adj.entry(b).or_default().push(a);
        }
        adj
    }

    /// Hop distances between the leaves `0..leaves`.
    fn leaf_distances(&self, leaves: usize) -> Vec<usize> {
        let adj = self.adjacency();
        let mut d = vec![0; leaves * leaves];
        for a in 0..leaves {
            let mut dist: BTreeMap<NodeId, usize> = BTreeMap::from([(a, 0)]);
            let mut queue = VecDeque::from([a]);
            while let Some(v) = queue.pop_front() {
                let dv = dist[&v];
                for &w in &adj[&v] {
                    if let std::collections::btree_map::Entry::Vacant(slot) = dist.entry(w) {
                        slot.insert(dv + 1);
                        queue.push_back(w);
                    }
                }
            }
            for b in 0..leaves {
                d[a * leaves + b] = dist[&b];
            }
        }
        d
    }

    /// Rooted at the first hidden node.
    fn rooted(&self) -> DecompTree {
        let root = self.n;
        let adj = self.adjacency();
        let mut kinds = BTreeMap::new();
        for &id in adj.keys() {
            let kind = if id < self.n { NodeKind::Leaf(id) } else { NodeKind::Internal };
            kinds.insert(id, kind);
        }
        let mut directed = Vec::new();
        let mut seen = std::collections::BTreeSet::from([root]);
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[&v] {
                if seen.insert(w) {
                    directed.push((v, w));
                    queue.push_back(w);
                }
            }
        }
        DecompTree::from_edges(root, kinds, &directed).expect("generated tree is well formed")
    }
}

/// Uniformly random unrooted binary topology over `n >= 3` leaves, rooted at
/// its first hidden node.
pub fn random_topology(n: usize, rng: &mut impl Rng) -> Result<DecompTree, SynthError> {
    if n < 3 {
        return Err(SynthError::TooFewLeaves(n));
    }
    let mut t = Unrooted::triple(n);
    for leaf in 3..n {
        let e = rng.gen_range(0..t.edges.len());
        t.insert(e, leaf);
    }
    Ok(t.rooted())
}

fn feasible_joint(pu: f64, pv: f64, rho: f64) -> Option<f64> {
    let puv = pu * pv + rho * (pu * (1.0 - pu) * pv * (1.0 - pv)).sqrt();
    let lo = (pu + pv - 1.0).max(0.0);
    let hi = pu.min(pv);
    (puv >= lo - 1e-15 && puv <= hi + 1e-15).then_some(puv.clamp(lo, hi))
}

/// Random tree model with edge correlations drawn from the configured range.
pub fn generate_model(cfg: &GeneratorConfig, seed: u64) -> Result<GeneratorModel, SynthError> {
    let (lo, hi) = cfg.rho_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(SynthError::BadBounds(lo, hi));
    }
    if !(0.0..=1.0).contains(&cfg.negative_prob) {
        return Err(SynthError::BadProbability(cfg.negative_prob));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topology = random_topology(cfg.n, &mut rng)?;
    let (mlo, mhi) = cfg.marginal_range;
    let draw_marginal = |rng: &mut ChaCha8Rng| rng.gen_range(mlo..mhi);

    let root_prior = draw_marginal(&mut rng);
    let mut marginal = BTreeMap::from([(topology.root(), root_prior)]);
    let mut edges = Vec::new();
    for (parent, child) in topology.edges() {
        let mag = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let rho = if rng.gen_bool(cfg.negative_prob) { -mag } else { mag };
        let pu = marginal[&parent];
        let mut chosen = None;
        for _ in 0..1000 {
            let pv = draw_marginal(&mut rng);
            if let Some(puv) = feasible_joint(pu, pv, rho) {
                chosen = Some((pv, puv));
                break;
            }
        }
        let (pv, puv) = chosen.unwrap_or_else(|| {
            let pv = if rho >= 0.0 { pu } else { 1.0 - pu };
            (pv, feasible_joint(pu, pv, rho).expect("mirrored marginal is always feasible"))
        });
        marginal.insert(child, pv);
        edges.push(EdgeModel {
            parent,
            child,
            rho,
            p_given_one: puv / pu,
            p_given_zero: (pv - puv) / (1.0 - pu),
        });
    }
    Ok(GeneratorModel {
        topology,
        edges,
        root_prior,
    })
}

/// Leaf correlations as path products of edge correlations, with exact marginals.
pub fn exact_matrix(model: &GeneratorModel) -> CorrelationMatrix {
    let n = model.n();
    let adj = model.topology.adjacency();
    let rho_of: BTreeMap<(NodeId, NodeId), f64> = model
        .edges
        .iter()
        .flat_map(|e| [((e.parent, e.child), e.rho), ((e.child, e.parent), e.rho)])
        .collect();
    let mut rho = vec![1.0; n * n];
    for a in 0..n {
        let mut prod: BTreeMap<NodeId, f64> = BTreeMap::from([(a, 1.0)]);
        let mut queue = VecDeque::from([a]);
        while let Some(v) = queue.pop_front() {
            let pv = prod[&v];
            for &w in &adj[&v] {
                if let std::collections::btree_map::Entry::Vacant(slot) = prod.entry(w) {
                    slot.insert(pv * rho_of[&(v, w)]);
                    queue.push_back(w);
                }
            }
        }
        for b in (a + 1)..n {
            rho[a * n + b] = prod[&b];
            rho[b * n + a] = prod[&b];
        }
    }
    let margins = model.marginals();
    let p = (0..n).map(|i| margins[&i]).collect();
    CorrelationMatrix::from_parts_unchecked(n, rho, p)
}

/// Ancestral sampling of the leaves.
pub fn sample_data(model: &GeneratorModel, rows: usize, seed: u64) -> SampleTable {
    let n = model.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut value: BTreeMap<NodeId, bool> = BTreeMap::new();
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        value.insert(model.topology.root(), rng.gen_bool(model.root_prior));
        for e in &model.edges {
            let p = if value[&e.parent] { e.p_given_one } else { e.p_given_zero };
            value.insert(e.child, rng.gen_bool(p.clamp(0.0, 1.0)));
        }
        out.push((0..n).map(|i| u8::from(value[&i])).collect());
    }
    SampleTable::new(out).expect("sampled rows are binary and rectangular")
}

/// Adds independent uniform noise in `[-eps, eps]` to every off-diagonal pair.
pub fn perturb(m: &CorrelationMatrix, eps: f64, seed: u64) -> Result<CorrelationMatrix, SynthError> {
    if eps.is_nan() || eps < 0.0 {
        return Err(SynthError::BadNoise(eps));
    }
    let n = m.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rho = vec![1.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let shift = if eps > 0.0 { rng.gen_range(-eps..=eps) } else { 0.0 };
            let v = (m.rho(i, j) + shift).clamp(-1.0, 1.0);
            rho[i * n + j] = v;
            rho[j * n + i] = v;
        }
    }
    Ok(CorrelationMatrix::from_parts_unchecked(
        n,
        rho,
        m.marginals().to_vec(),
    ))
}

#[derive(Debug, Clone)]
pub struct ExhaustiveResult {
    pub tree: DecompTree,
    /// Total deviation over all leaf quartets at the pairing the tree induces.
    pub score: f64,
    /// Complete topologies whose score was evaluated.
    pub scanned: usize,
}

/// Best binary topology by total quartet deviation, by branch and bound over
/// stepwise leaf insertion. A partial tree is abandoned once its partial score
/// reaches the best complete score found so far.
pub fn exhaustive_best_tree<Q: QuadOracle + ?Sized>(m: &Q) -> Result<ExhaustiveResult, SynthError> {
    let n = m.n();
    if n > EXHAUSTIVE_MAX_N {
        return Err(SynthError::TooLarge {
            max: EXHAUSTIVE_MAX_N,
            found: n,
        });
    }
    if n < 3 {
        return Err(SynthError::TooFewLeaves(n));
    }
    let mut search = Search {
        m,
        n,
        best: None,
        scanned: 0,
    };
    search.descend(Unrooted::triple(n), 3, 0.0);
    let (tree, score) = search.best.expect("at least one topology exists");
    Ok(ExhaustiveResult {
        tree: tree.rooted(),
        score,
        scanned: search.scanned,
    })
}

struct Search<'q, Q: ?Sized> {
    m: &'q Q,
    n: usize,
    best: Option<(Unrooted, f64)>,
    scanned: usize,
}

impl<Q: QuadOracle + ?Sized> Search<'_, Q> {
    fn descend(&mut self, t: Unrooted, placed: usize, score: f64) {
        if placed == self.n {
            self.scanned += 1;
            if self.best.as_ref().is_none_or(|(_, b)| score < *b) {
                self.best = Some((t, score));
            }
            return;
        }
        let leaf = placed;
        for e in 0..t.edges.len() {
            let mut next = t.clone();
            next.insert(e, leaf);
            let added = self.new_quartets(&next, leaf);
            let total = score + added;
            let complete = leaf + 1 == self.n;
            if !complete && self.best.as_ref().is_some_and(|(_, b)| total >= *b) {
                continue;
            }
            self.descend(next, leaf + 1, total);
        }
    }

    /// Deviation summed over quartets that contain `leaf` and three earlier leaves.
    fn new_quartets(&self, t: &Unrooted, leaf: usize) -> f64 {
        let k = leaf + 1;
        let d = t.leaf_distances(k);
        let dist = |a: usize, b: usize| d[a * k + b];
        let mut sum = 0.0;
        for a in 0..leaf {
            for b in (a + 1)..leaf {
                for c in (b + 1)..leaf {
                    let x = leaf;
                    let opts = [
                        (dist(a, b) + dist(c, x), [a, b, c, x]),
                        (dist(a, c) + dist(b, x), [a, c, b, x]),
                        (dist(a, x) + dist(b, c), [a, x, b, c]),
                    ];
                    let [i, j, kk, l] = opts.iter().min_by_key(|o| o.0).unwrap().1;
                    sum += self.m.quad(i, j, kk, l);
                }
            }
        }
        sum
    }
}
