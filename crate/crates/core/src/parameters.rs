//! Edge correlations and hidden-node probabilities for a fixed topology.
//!
//! Leaf correlations factor as products of edge correlations along tree
//! paths, so `log|rho_ij|` is a sum of per-edge unknowns. Magnitudes come
//! from the least-squares solution of that linear system; signs come from a
//! separate parity solve. Each hidden node's prior and leaf conditionals are
//! then fitted to the implied leaf-to-hidden correlations under box
//! constraints.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::CorrelationMatrix;
use crate::tree::{DecompTree, NodeId, SimplifyPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Stage2Error {
    #[error("|rho[{0}][{1}]| is below the configured floor")]
    CorrelationTooSmall(usize, usize),
    #[error("hidden node {0} has {1} incident edges; suppress degree-2 nodes first")]
    TreeNotSimplified(NodeId, usize),
    #[error("leaf {0} is not a variable of the correlation matrix")]
    UnknownLeaf(usize),
    #[error("path system is singular (condition ratio {0:e})")]
    SingularSystem(f64),
    #[error("parameter fit for hidden node {node} did not converge (objective {objective:e})")]
    FitNotConverged { node: NodeId, objective: f64, best: Box<HiddenFit> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of starting priors, spread evenly over (0, 1).
    pub starts: usize,
    pub max_iter: usize,
    /// Projected-gradient norm accepted as stationary.
    pub gtol: f64,
    /// Objective treated as an exact fit.
    pub zero_tol: f64,
    /// Priors are kept in `[q_floor, 1 - q_floor]`, where the correlation formula is defined.
    pub q_floor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            starts: 9,
            max_iter: 5000,
            gtol: 1e-10,
            zero_tol: 1e-14,
            q_floor: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    /// Leaf pairs with smaller |rho| are left out of the log system.
    pub rho_min: f64,
    /// Fail instead of excluding small-correlation rows.
    pub strict_rows: bool,
    /// Smallest accepted ratio of extreme singular values.
    pub min_condition_ratio: f64,
    /// Edge magnitudes above `1 + edge_tol` are reported as violations.
    pub edge_tol: f64,
    /// Clamp reported edge correlations into [-1, 1].
    pub clamp_edges: bool,
    pub fit: FitConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            rho_min: 1e-6,
            strict_rows: false,
            min_condition_ratio: 1e-10,
            edge_tol: 1e-9,
            clamp_edges: false,
            fit: FitConfig::default(),
        }
    }
}

/// Linear system `A x = b` with one unknown per edge and one row per leaf pair.
#[derive(Debug, Clone)]
pub struct PathSystem {
    pub tree: DecompTree,
    pub edges: Vec<(NodeId, NodeId)>,
    pub rows: Vec<(usize, usize)>,
    pub a: DMatrix<f64>,
    /// `log|rho_ij|` per row.
    pub b: DVector<f64>,
    /// Sign of `rho_ij` per row.
    pub sign_b: Vec<i8>,
    /// Leaf pairs left out because `|rho_ij| < rho_min`.
    pub excluded: Vec<(usize, usize)>,
}

impl PathSystem {
    /// Edge indices on the path between two leaves.
    fn path_edges(&self, index: &BTreeMap<(NodeId, NodeId), usize>, a: usize, b: usize) -> Vec<usize> {
        self.tree
            .path(a, b)
            .windows(2)
            .map(|w| index[&(w[0].min(w[1]), w[0].max(w[1]))])
            .collect()
    }
}

fn edge_index(edges: &[(NodeId, NodeId)]) -> BTreeMap<(NodeId, NodeId), usize> {
    edges
        .iter()
        .enumerate()
        .map(|(e, &(p, c))| ((p.min(c), p.max(c)), e))
        .collect()
}

pub fn build_path_system(
    tree: &DecompTree,
    m: &CorrelationMatrix,
    cfg: &Stage2Config,
) -> Result<PathSystem, Stage2Error> {
    for id in tree.internal_nodes() {
        let d = tree.degree(id);
        if d < 3 {
            return Err(Stage2Error::TreeNotSimplified(id, d));
        }
    }
    let leaves: Vec<usize> = tree.leaf_set().iter().copied().collect();
    if let Some(&bad) = leaves.iter().find(|&&v| v >= m.n()) {
        return Err(Stage2Error::UnknownLeaf(bad));
    }
    let edges = tree.edges();
    let index = edge_index(&edges);

    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (x, &i) in leaves.iter().enumerate() {
        for &j in &leaves[x + 1..] {
            if m.rho(i, j).abs() < cfg.rho_min {
                if cfg.strict_rows {
                    return Err(Stage2Error::CorrelationTooSmall(i, j));
                }
                excluded.push((i, j));
            } else {
                rows.push((i, j));
            }
        }
    }
    if rows.len() < edges.len() {
        let (i, j) = excluded[0];
        return Err(Stage2Error::CorrelationTooSmall(i, j));
    }

    let mut sys = PathSystem {
        tree: tree.clone(),
        a: DMatrix::zeros(rows.len(), edges.len()),
        b: DVector::zeros(rows.len()),
        sign_b: Vec::with_capacity(rows.len()),
        edges,
        rows,
        excluded,
    };
    for r in 0..sys.rows.len() {
        let (i, j) = sys.rows[r];
        for e in sys.path_edges(&index, i, j) {
            sys.a[(r, e)] = 1.0;
        }
        let rho = m.rho(i, j);
        sys.b[r] = rho.abs().ln();
        sys.sign_b.push(if rho < 0.0 { -1 } else { 1 });
    }
    Ok(sys)
}

/// Least-squares per-edge log magnitudes and the residual norm `‖A x - b‖₂`.
pub fn solve_edge_magnitudes(sys: &PathSystem, min_condition_ratio: f64) -> Result<(DVector<f64>, f64), Stage2Error> {
    let svd = sys.a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if ratio <= min_condition_ratio {
        return Err(Stage2Error::SingularSystem(ratio));
    }
    let x = svd
        .solve(&sys.b, smax * min_condition_ratio)
        .map_err(|_| Stage2Error::SingularSystem(ratio))?;
    let residual = (&sys.a * &x - &sys.b).norm();
    Ok((x, residual))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignSolution {
    /// Per-edge sign, aligned with `PathSystem::edges`.
    pub signs: Vec<i8>,
    /// Rows whose observed sign the assignment does not reproduce.
    pub violations: usize,
}

/// Leaf signs `s` with `s_i s_j = sign(rho_ij)` for as many rows as possible.
fn leaf_signs(leaves: &[usize], rows: &[(usize, usize)], sign_b: &[i8]) -> (BTreeMap<usize, i8>, usize) {
    let count = |s: &BTreeMap<usize, i8>| {
        rows.iter()
            .zip(sign_b)
            .filter(|(&(i, j), &sb)| s[&i] * s[&j] != sb)
            .count()
    };
    let mut nb: BTreeMap<usize, Vec<(usize, i8)>> = leaves.iter().map(|&v| (v, Vec::new())).collect();
    for (&(i, j), &sb) in rows.iter().zip(sign_b) {
        nb.get_mut(&i).unwrap().push((j, sb));
        nb.get_mut(&j).unwrap().push((i, sb));
    }
    let mut s: BTreeMap<usize, i8> = BTreeMap::new();
    for &start in leaves {
        if s.contains_key(&start) {
            continue;
        }
        s.insert(start, 1);
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &(w, sb) in &nb[&v] {
                if !s.contains_key(&w) {
                    s.insert(w, s[&v] * sb);
                    queue.push_back(w);
                }
            }
        }
    }
    let mut best = count(&s);
    if best == 0 {
        return (s, 0);
    }
    if leaves.len() <= 20 {
        // fix the first leaf and scan every other assignment
        let rest = &leaves[1..];
        for mask in 0u32..(1u32 << rest.len()) {
            let mut cand = BTreeMap::from([(leaves[0], 1i8)]);
            for (b, &v) in rest.iter().enumerate() {
                cand.insert(v, if mask >> b & 1 == 1 { -1 } else { 1 });
            }
            let c = count(&cand);
            if c < best {
                best = c;
                s = cand;
            }
        }
    } else {
        loop {
            let mut improved = false;
            for &v in leaves {
                *s.get_mut(&v).unwrap() *= -1;
                let c = count(&s);
                if c < best {
                    best = c;
                    improved = true;
                } else {
                    *s.get_mut(&v).unwrap() *= -1;
                }
            }
            if !improved {
                break;
            }
        }
    }
    (s, best)
}

/// Edge signs reproducing the observed pairwise signs, in the gauge with the
/// fewest negative edges.
///
/// Flipping a hidden variable flips every incident edge without changing any
/// leaf-pair sign. Any realizable sign pattern is `s_i s_j` for leaf signs
/// `s`, so leaf edges take `s` and the gauge is then optimized over hidden
/// nodes by dynamic programming.
pub fn solve_edge_signs(sys: &PathSystem) -> SignSolution {
    let tree = &sys.tree;
    let leaves: Vec<usize> = tree.leaf_set().iter().copied().collect();
    let (s, violations) = leaf_signs(&leaves, &sys.rows, &sys.sign_b);
    let index = edge_index(&sys.edges);
    let base = |c: NodeId| -> i8 { if tree.is_leaf(c) { s[&c] } else { 1 } };

    // cost[v][g]: fewest negative edges in v's subtree given flip g at v (0 = keep, 1 = flip)
    let mut cost: BTreeMap<NodeId, [usize; 2]> = BTreeMap::new();
    let sign_of = |b: i8, gp: usize, gc: usize| -> i8 {
        let f = |g: usize| if g == 1 { -1 } else { 1 };
        b * f(gp) * f(gc)
    };
    let order = tree.preorder();
    for &v in order.iter().rev() {
        if tree.is_leaf(v) {
            continue;
        }
        let mut c = [0usize; 2];
        for (gv, slot) in c.iter_mut().enumerate() {
            for &ch in tree.children(v) {
                let b = base(ch);
                *slot += if tree.is_leaf(ch) {
                    usize::from(sign_of(b, gv, 0) < 0)
                } else {
                    (0..2)
                        .map(|gc| cost[&ch][gc] + usize::from(sign_of(b, gv, gc) < 0))
                        .min()
                        .unwrap()
                };
            }
        }
        cost.insert(v, c);
    }
    let mut flip: BTreeMap<NodeId, usize> = BTreeMap::new();
    let root = tree.root();
    let rc = cost[&root];
    flip.insert(root, usize::from(rc[1] < rc[0]));
    for &v in &order {
        if tree.is_leaf(v) {
            continue;
        }
        let gv = flip[&v];
        for &ch in tree.children(v) {
            if tree.is_leaf(ch) {
                flip.insert(ch, 0);
                continue;
            }
            let b = base(ch);
            let score = |gc: usize| cost[&ch][gc] + usize::from(sign_of(b, gv, gc) < 0);
            flip.insert(ch, usize::from(score(1) < score(0)));
        }
    }
    let mut signs = vec![1i8; sys.edges.len()];
    for &(p, c) in &sys.edges {
        signs[index[&(p.min(c), p.max(c))]] = sign_of(base(c), flip[&p], flip[&c]);
    }
    SignSolution { signs, violations }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSolution {
    pub edges: Vec<(NodeId, NodeId)>,
    pub log_abs: Vec<f64>,
    pub sign: Vec<i8>,
    pub rho_edge: Vec<f64>,
    pub residual_norm: f64,
    pub sign_violations: usize,
    /// Edges whose recovered magnitude exceeds 1 beyond tolerance.
    pub out_of_range: Vec<(NodeId, NodeId)>,
}

impl EdgeSolution {
    pub fn rho(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.edges
            .iter()
            .position(|&(p, c)| (p, c) == (a, b) || (c, p) == (a, b))
            .map(|e| self.rho_edge[e])
    }

    fn lookup(&self) -> BTreeMap<(NodeId, NodeId), f64> {
        self.edges
            .iter()
            .zip(&self.rho_edge)
            .flat_map(|(&(p, c), &r)| [((p, c), r), ((c, p), r)])
            .collect()
    }
}

pub fn solve_edges(sys: &PathSystem, cfg: &Stage2Config) -> Result<EdgeSolution, Stage2Error> {
    let (x, residual_norm) = solve_edge_magnitudes(sys, cfg.min_condition_ratio)?;
    let signs = solve_edge_signs(sys);
    let mut rho_edge = Vec::with_capacity(x.len());
    let mut out_of_range = Vec::new();
    for (e, (&lx, &s)) in x.iter().zip(&signs.signs).enumerate() {
        let mut r = f64::from(s) * lx.exp();
        if r.abs() > 1.0 + cfg.edge_tol {
            out_of_range.push(sys.edges[e]);
            if cfg.clamp_edges {
                r = r.clamp(-1.0, 1.0);
            }
        }
        rho_edge.push(r);
    }
    Ok(EdgeSolution {
        edges: sys.edges.clone(),
        log_abs: x.iter().copied().collect(),
        sign: signs.signs,
        rho_edge,
        residual_norm,
        sign_violations: signs.violations,
        out_of_range,
    })
}

/// Path products from each leaf to every node reachable from it.
fn products_from(tree: &DecompTree, edges: &EdgeSolution, leaf: usize) -> BTreeMap<NodeId, f64> {
    let adj = tree.adjacency();
    let rho = edges.lookup();
    let mut prod = BTreeMap::from([(leaf, 1.0)]);
    let mut queue = VecDeque::from([leaf]);
    while let Some(v) = queue.pop_front() {
        let pv = prod[&v];
        for &w in &adj[&v] {
            if let std::collections::btree_map::Entry::Vacant(slot) = prod.entry(w) {
                slot.insert(pv * rho[&(v, w)]);
                queue.push_back(w);
            }
        }
    }
    prod
}

/// Implied correlation between every hidden node and every leaf.
pub type LeafHiddenTable = BTreeMap<NodeId, Vec<(usize, f64)>>;

pub fn leaf_hidden_correlations(tree: &DecompTree, edges: &EdgeSolution) -> LeafHiddenTable {
    let hidden = tree.internal_nodes();
    let mut table: LeafHiddenTable = hidden.iter().map(|&h| (h, Vec::new())).collect();
    for &leaf in tree.leaf_set() {
        let prod = products_from(tree, edges, leaf);
        for &h in &hidden {
            table.get_mut(&h).unwrap().push((leaf, prod[&h]));
        }
    }
    table
}

/// Leaf correlations implied by the edge solution; unit diagonal.
pub fn reconstruct_correlations(tree: &DecompTree, edges: &EdgeSolution) -> Vec<Vec<f64>> {
    let n = tree.leaf_set().iter().max().map_or(0, |m| m + 1);
    let mut out = vec![vec![0.0; n]; n];
    let leaves: Vec<usize> = tree.leaf_set().iter().copied().collect();
    for &a in &leaves {
        out[a][a] = 1.0;
        let prod = products_from(tree, edges, a);
        for &b in leaves.iter().filter(|&&b| b > a) {
            out[a][b] = prod[&b];
            out[b][a] = prod[&b];
        }
    }
    out
}

/// Correlation between leaf `i` and hidden node `w` implied by
/// `p(i)`, `p(w)` and `p(i | w)`.
pub fn leaf_hidden_rho(p_leaf: f64, prior: f64, conditional: f64) -> f64 {
    (conditional - p_leaf) * prior / ((p_leaf * (1.0 - p_leaf)).sqrt() * (prior * (1.0 - prior)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenFit {
    pub prior: f64,
    /// `(leaf, p(leaf = 1 | hidden = 1))`.
    pub conditional: Vec<(usize, f64)>,
    pub fit_residual: f64,
    /// Exact fits form a continuum; the returned one has the prior closest to 1/2.
    pub non_unique: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeParameters {
    pub nodes: BTreeMap<NodeId, HiddenFit>,
    /// Sum of per-node objectives.
    pub fit_residual: f64,
}

/// One hidden node's fitting problem.
struct NodeProblem<'a> {
    p: Vec<f64>,
    sd: Vec<f64>,
    rho: &'a [f64],
    cfg: &'a FitConfig,
}

/// Variables are `[q, c_1, .., c_k]`.
impl NodeProblem<'_> {
    fn odds(q: f64) -> f64 {
        (q / (1.0 - q)).sqrt()
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let h = Self::odds(x[0]);
        (0..self.p.len())
            .map(|i| {
                let r = h * (x[i + 1] - self.p[i]) / self.sd[i] - self.rho[i];
                r * r
            })
            .sum()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let q = x[0];
        let h = Self::odds(q);
        let dh = 0.5 / (q.sqrt() * (1.0 - q).powf(1.5));
        let mut g = vec![0.0; x.len()];
        for i in 0..self.p.len() {
            let dev = (x[i + 1] - self.p[i]) / self.sd[i];
            let r = h * dev - self.rho[i];
            g[0] += 2.0 * r * dh * dev;
            g[i + 1] = 2.0 * r * h / self.sd[i];
        }
        g
    }

    fn project(&self, x: &mut [f64]) {
        x[0] = x[0].clamp(self.cfg.q_floor, 1.0 - self.cfg.q_floor);
        for c in &mut x[1..] {
            *c = c.clamp(0.0, 1.0);
        }
    }

    /// Best conditionals for a fixed prior.
    fn conditionals_at(&self, q: f64) -> Vec<f64> {
        let h = Self::odds(q);
        (0..self.p.len())
            .map(|i| (self.p[i] + self.rho[i] * self.sd[i] / h).clamp(0.0, 1.0))
            .collect()
    }

    fn profile(&self, q: f64) -> f64 {
        let mut x = vec![q];
        x.extend(self.conditionals_at(q));
        self.objective(&x)
    }

    fn stationarity(&self, x: &[f64]) -> f64 {
        let g = self.gradient(x);
        let mut y: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b).collect();
        self.project(&mut y);
        x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Result of one projected-gradient run.
#[derive(Debug, Clone)]
pub struct StartResult {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Objective after every accepted iteration, starting with the initial point.
    pub history: Vec<f64>,
    pub converged: bool,
}

fn run_start(prob: &NodeProblem<'_>, q0: f64) -> StartResult {
    let cfg = prob.cfg;
    let mut x = vec![q0];
    x.extend(prob.p.iter().copied());
    prob.project(&mut x);
    let mut f = prob.objective(&x);
    let mut history = vec![f];
    let mut step = 1.0;
    let mut converged = f <= cfg.zero_tol || prob.stationarity(&x) <= cfg.gtol;
    for _ in 0..cfg.max_iter {
        if converged {
            break;
        }
        let g = prob.gradient(&x);
        let mut accepted = false;
        while step > 1e-20 {
            let mut y: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            prob.project(&mut y);
            let decrease: f64 = x.iter().zip(&y).zip(&g).map(|((a, b), gi)| gi * (a - b)).sum();
            let fy = prob.objective(&y);
            if fy <= f - 1e-4 * decrease && fy <= f {
                x = y;
                f = fy;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        history.push(f);
        step = (step * 2.0).min(1e6);
        converged = f <= cfg.zero_tol || prob.stationarity(&x) <= cfg.gtol;
    }
    StartResult {
        objective: f,
        x,
        history,
        converged,
    }
}

/// Projected-gradient runs from every configured starting prior.
pub fn fit_starts(p_leaf: &[f64], rho_iw: &[f64], cfg: &FitConfig) -> Vec<StartResult> {
    let prob = NodeProblem {
        sd: p_leaf.iter().map(|&p| (p * (1.0 - p)).sqrt()).collect(),
        p: p_leaf.to_vec(),
        rho: rho_iw,
        cfg,
    };
    let k = cfg.starts.max(1);
    (0..k)
        .map(|s| run_start(&prob, (s as f64 + 1.0) / (k as f64 + 1.0)))
        .collect()
}

/// Fits one hidden node's prior and leaf conditionals under box constraints.
pub fn fit_hidden_node(p_leaf: &[f64], rho_iw: &[f64], cfg: &FitConfig) -> (HiddenFit, bool) {
    let prob = NodeProblem {
        sd: p_leaf.iter().map(|&p| (p * (1.0 - p)).sqrt()).collect(),
        p: p_leaf.to_vec(),
        rho: rho_iw,
        cfg,
    };
    let runs = fit_starts(p_leaf, rho_iw, cfg);
    let best = runs
        .iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .expect("at least one start");

    // conditionals are separable given the prior, so polishing them never hurts
    let mut q = best.x[0];
    let mut objective = prob.profile(q).min(best.objective);
    let mut non_unique = false;
    if objective <= cfg.zero_tol {
        non_unique = true;
        // exact fits form an interval of priors; walk towards 1/2 within it
        if prob.profile(0.5) <= cfg.zero_tol {
            q = 0.5;
        } else {
            let (mut inside, mut outside) = (q, 0.5);
            for _ in 0..200 {
                let mid = 0.5 * (inside + outside);
                if prob.profile(mid) <= cfg.zero_tol {
                    inside = mid;
                } else {
                    outside = mid;
                }
            }
            q = inside;
        }
        objective = prob.profile(q);
    }
    let conditional = if objective <= best.objective {
        prob.conditionals_at(q)
    } else {
        q = best.x[0];
        objective = best.objective;
        best.x[1..].to_vec()
    };
    let converged = best.converged || objective <= cfg.zero_tol;
    (
        HiddenFit {
            prior: q,
            conditional: Vec::new(),
            fit_residual: objective,
            non_unique,
            converged,
        }
        .with_conditionals(conditional),
        converged,
    )
}

impl HiddenFit {
    fn with_conditionals(mut self, c: Vec<f64>) -> Self {
        self.conditional = c.into_iter().enumerate().collect();
        self
    }

    fn relabel(mut self, leaves: &[usize]) -> Self {
        for (slot, &leaf) in self.conditional.iter_mut().zip(leaves) {
            slot.0 = leaf;
        }
        self
    }
}

/// Fits every hidden node of the table.
pub fn fit_node_parameters(
    m: &CorrelationMatrix,
    table: &LeafHiddenTable,
    cfg: &FitConfig,
) -> Result<NodeParameters, Stage2Error> {
    let fits: Vec<(NodeId, HiddenFit, bool)> = table
        .par_iter()
        .map(|(&node, entries)| {
            let leaves: Vec<usize> = entries.iter().map(|e| e.0).collect();
            let p: Vec<f64> = leaves.iter().map(|&i| m.marginal(i)).collect();
            let rho: Vec<f64> = entries.iter().map(|e| e.1).collect();
            let (fit, ok) = fit_hidden_node(&p, &rho, cfg);
            (node, fit.relabel(&leaves), ok)
        })
        .collect();
    let mut nodes = BTreeMap::new();
    let mut total = 0.0;
    for (node, fit, ok) in fits {
        if !ok {
            return Err(Stage2Error::FitNotConverged {
                node,
                objective: fit.fit_residual,
                best: Box::new(fit),
            });
        }
        total += fit.fit_residual;
        nodes.insert(node, fit);
    }
    Ok(NodeParameters {
        nodes,
        fit_residual: total,
    })
}

/// Everything recovered for one topology.
#[derive(Debug, Clone)]
pub struct Stage2Output {
    /// The simplified tree the system was built on.
    pub tree: DecompTree,
    pub system_rows: usize,
    pub excluded: Vec<(usize, usize)>,
    pub edges: EdgeSolution,
    pub params: NodeParameters,
    pub reconstructed: Vec<Vec<f64>>,
    pub max_reconstruction_error: f64,
}

/// Simplifies `tree`, solves for edge correlations and fits hidden-node parameters.
pub fn estimate(tree: &DecompTree, m: &CorrelationMatrix, cfg: &Stage2Config) -> Result<Stage2Output, Stage2Error> {
    let simple = tree.simplify(SimplifyPolicy::SuppressDegree2);
    let sys = build_path_system(&simple, m, cfg)?;
    let edges = solve_edges(&sys, cfg)?;
    let table = leaf_hidden_correlations(&simple, &edges);
    let params = fit_node_parameters(m, &table, &cfg.fit)?;
    let reconstructed = reconstruct_correlations(&simple, &edges);
    let leaves: Vec<usize> = simple.leaf_set().iter().copied().collect();
    let mut worst: f64 = 0.0;
    for &i in &leaves {
        for &j in &leaves {
            worst = worst.max((reconstructed[i][j] - m.rho(i, j)).abs());
        }
    }
    Ok(Stage2Output {
        tree: simple,
        system_rows: sys.rows.len(),
        excluded: sys.excluded,
        edges,
        params,
        reconstructed,
        max_reconstruction_error: worst,
    })
}

/// Per-edge entry of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeReport {
    pub parent: NodeId,
    pub child: NodeId,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenReport {
    pub id: NodeId,
    pub prior: f64,
    pub conditionals: BTreeMap<usize, f64>,
    pub fit_residual: f64,
    pub non_unique: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub residual_norm: f64,
    pub fit_residual: f64,
    pub sign_violations: usize,
    pub max_reconstruction_error: f64,
    pub excluded_rows: Vec<(usize, usize)>,
    pub out_of_range_edges: Vec<(NodeId, NodeId)>,
}

/// Serializable summary of [`Stage2Output`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub tree: DecompTree,
    pub edges: Vec<EdgeReport>,
    pub hidden: Vec<HiddenReport>,
    pub diagnostics: Diagnostics,
    /// Edge signs come from a parity solve on sign(rho), not from the log system.
    pub signs_reconstructed: bool,
    /// At least one hidden node has a continuum of exact fits.
    pub non_unique_parameters: bool,
}

impl Stage2Output {
    pub fn report(&self) -> Stage2Report {
        let edges = self
            .edges
            .edges
            .iter()
            .zip(&self.edges.rho_edge)
            .map(|(&(parent, child), &rho)| EdgeReport { parent, child, rho })
            .collect();
        let hidden: Vec<HiddenReport> = self
            .params
            .nodes
            .iter()
            .map(|(&id, fit)| HiddenReport {
                id,
                prior: fit.prior,
                conditionals: fit.conditional.iter().copied().collect(),
                fit_residual: fit.fit_residual,
                non_unique: fit.non_unique,
            })
            .collect();
        Stage2Report {
            tree: self.tree.clone(),
            edges,
            non_unique_parameters: hidden.iter().any(|h| h.non_unique),
            hidden,
            diagnostics: Diagnostics {
                residual_norm: self.edges.residual_norm,
                fit_residual: self.params.fit_residual,
                sign_violations: self.edges.sign_violations,
                max_reconstruction_error: self.max_reconstruction_error,
                excluded_rows: self.excluded.clone(),
                out_of_range_edges: self.edges.out_of_range.clone(),
            },
            signs_reconstructed: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::ForestState;

    /// Quartet (0, 1) | (2, 3): leaf edges 0.8, 0.7, 0.6, 0.9, middle 0.5.
    fn quartet() -> (DecompTree, CorrelationMatrix) {
        let s = ForestState::new(4).combine_pair_pair(0, 1, 2, 3).unwrap();
        let tree = s.trees().values().next().unwrap().simplify(SimplifyPolicy::SuppressDegree2);
        let e = [0.8, 0.7, 0.6, 0.9];
        let mut rho = vec![vec![1.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    rho[i][j] = e[i] * e[j] * if (i < 2) == (j < 2) { 1.0 } else { 0.5 };
                }
            }
        }
        (tree, CorrelationMatrix::new(rho, vec![0.4, 0.5, 0.6, 0.3]).unwrap())
    }

    #[test]
    fn quartet_system_shape() {
        let (tree, m) = quartet();
        let sys = build_path_system(&tree, &m, &Stage2Config::default()).unwrap();
        assert_eq!(sys.a.shape(), (6, 5));
        for r in 0..6 {
            assert!(sys.a.row(r).iter().any(|&v| v == 1.0));
        }
    }

    #[test]
    fn star_system_has_two_edges_per_row() {
        let tree = DecompTree::star(3, &[0, 1, 2]);
        let m = CorrelationMatrix::new(
            vec![vec![1.0, 0.72, 0.48], vec![0.72, 1.0, 0.54], vec![0.48, 0.54, 1.0]],
            vec![0.5; 3],
        )
        .unwrap();
        let sys = build_path_system(&tree, &m, &Stage2Config::default()).unwrap();
        assert_eq!(sys.a.shape(), (3, 3));
        for r in 0..3 {
            assert_eq!(sys.a.row(r).sum(), 2.0);
        }
        let sol = solve_edges(&sys, &Stage2Config::default()).unwrap();
        for (leaf, expect) in [(0, 0.8), (1, 0.9), (2, 0.6)] {
            assert!((sol.rho(3, leaf).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn unsimplified_tree_is_rejected() {
        let (_, m) = quartet();
        let s = ForestState::new(4).combine_pair_pair(0, 1, 2, 3).unwrap();
        let raw = s.trees().values().next().unwrap();
        assert!(matches!(
            build_path_system(raw, &m, &Stage2Config::default()),
            Err(Stage2Error::TreeNotSimplified(6, 2))
        ));
    }

    #[test]
    fn zero_correlation_row_handling() {
        let tree = DecompTree::star(3, &[0, 1, 2]);
        let m = CorrelationMatrix::new(
            vec![vec![1.0, 0.0, 0.5], vec![0.0, 1.0, 0.5], vec![0.5, 0.5, 1.0]],
            vec![0.5; 3],
        )
        .unwrap();
        let strict = Stage2Config {
            strict_rows: true,
            ..Stage2Config::default()
        };
        assert_eq!(
            build_path_system(&tree, &m, &strict).unwrap_err(),
            Stage2Error::CorrelationTooSmall(0, 1)
        );
        // 2 rows left for 3 edges
        assert_eq!(
            build_path_system(&tree, &m, &Stage2Config::default()).unwrap_err(),
            Stage2Error::CorrelationTooSmall(0, 1)
        );
    }

    #[test]
    fn quartet_edges_recovered() {
        let (tree, m) = quartet();
        let sys = build_path_system(&tree, &m, &Stage2Config::default()).unwrap();
        let sol = solve_edges(&sys, &Stage2Config::default()).unwrap();
        assert!(sol.residual_norm < 1e-10);
        let (a, b) = (4, 5);
        let expect = [((a, 0), 0.8), ((a, 1), 0.7), ((b, 2), 0.6), ((b, 3), 0.9), ((a, b), 0.5)];
        for ((x, y), v) in expect {
            let r = sol.rho(x, y).unwrap();
            assert!((r.ln() - f64::ln(v)).abs() < 1e-10, "edge {x}-{y}: {r}");
        }
        assert!(sol.sign.iter().all(|&s| s == 1));
        let table = leaf_hidden_correlations(&tree, &sol);
        let to_b = table[&b].iter().find(|e| e.0 == 0).unwrap().1;
        assert!((to_b - 0.4).abs() < 1e-10);
        let to_a = table[&a].iter().find(|e| e.0 == 0).unwrap().1;
        assert!((to_a - 0.8).abs() < 1e-10);

        let rec = reconstruct_correlations(&tree, &sol);
        for i in 0..4 {
            assert_eq!(rec[i][i], 1.0);
            for j in 0..4 {
                assert_eq!(rec[i][j], rec[j][i]);
                assert!((rec[i][j] - m.rho(i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn perturbed_row_residual_is_bounded() {
        let (tree, m) = quartet();
        let mut sys = build_path_system(&tree, &m, &Stage2Config::default()).unwrap();
        let delta = 0.01;
        sys.b[2] += delta;
        let (_, res) = solve_edge_magnitudes(&sys, 1e-10).unwrap();
        assert!(res <= delta + 1e-12);
        assert!(res > 0.0);
    }

    #[test]
    fn sign_of_one_negative_leaf_edge() {
        let (tree, m) = quartet();
        let mut rows = m.rows();
        for j in 0..4 {
            if j != 2 {
                rows[2][j] = -rows[2][j];
                rows[j][2] = -rows[j][2];
            }
        }
        let m = CorrelationMatrix::new(rows, m.marginals().to_vec()).unwrap();
        let sys = build_path_system(&tree, &m, &Stage2Config::default()).unwrap();
        let sol = solve_edges(&sys, &Stage2Config::default()).unwrap();
        assert_eq!(sol.sign_violations, 0);
        assert_eq!(sol.sign.iter().filter(|&&s| s < 0).count(), 1);
        let rec = reconstruct_correlations(&tree, &sol);
        for i in 0..4 {
            for j in 0..4 {
                assert!((rec[i][j] - m.rho(i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gauge_prefers_a_single_internal_flip() {
        // three negative leaf edges under one node collapse to one negative edge
        let (tree, m) = quartet();
        let mut rows = m.rows();
        for (i, j) in [(0, 2), (0, 3), (1, 2), (1, 3)] {
            rows[i][j] = -rows[i][j];
            rows[j][i] = -rows[j][i];
        }
        let m = CorrelationMatrix::new(rows, m.marginals().to_vec()).unwrap();
        let sys = build_path_system(&tree, &m, &Stage2Config::default()).unwrap();
        let sol = solve_edges(&sys, &Stage2Config::default()).unwrap();
        assert_eq!(sol.sign.iter().filter(|&&s| s < 0).count(), 1);
        assert!(sol.rho(4, 5).unwrap() < 0.0);
    }

    #[test]
    fn inconsistent_star_signs_are_reported() {
        let tree = DecompTree::star(3, &[0, 1, 2]);
        let m = CorrelationMatrix::new(
            vec![vec![1.0, -0.25, 0.25], vec![-0.25, 1.0, 0.25], vec![0.25, 0.25, 1.0]],
            vec![0.5; 3],
        )
        .unwrap();
        let sys = build_path_system(&tree, &m, &Stage2Config::default()).unwrap();
        let sol = solve_edge_signs(&sys);
        assert!(sol.violations >= 1);
        assert_eq!(sol.signs.len(), 3);
    }

    #[test]
    fn leaf_hidden_formula_matches_correlation_definition() {
        // p_iw = c q and p_w = q in the pairwise formula
        for &(pi, q, c) in &[(0.3f64, 0.4, 0.6), (0.7, 0.2, 0.9), (0.5, 0.5, 0.1)] {
            let direct = (c * q - pi * q) / (pi * (1.0 - pi) * q * (1.0 - q)).sqrt();
            assert!((leaf_hidden_rho(pi, q, c) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_correlations_fit_at_marginals() {
        let p = [0.3, 0.6, 0.5];
        let (fit, ok) = fit_hidden_node(&p, &[0.0; 3], &FitConfig::default());
        assert!(ok);
        assert_eq!(fit.fit_residual, 0.0);
        assert_eq!(fit.prior, 0.5);
        for (i, &(_, c)) in fit.conditional.iter().enumerate() {
            assert!((c - p[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_generated_correlations_are_refit() {
        let q = 0.5;
        let cond = [0.9, 0.2, 0.7, 0.65];
        let p = [0.6, 0.35, 0.5, 0.45];
        let rho: Vec<f64> = (0..4).map(|i| leaf_hidden_rho(p[i], q, cond[i])).collect();
        let (fit, ok) = fit_hidden_node(&p, &rho, &FitConfig::default());
        assert!(ok);
        assert!(fit.fit_residual <= 1e-8);
        assert!(fit.non_unique);
        for (i, &(_, c)) in fit.conditional.iter().enumerate() {
            assert!((0.0..=1.0).contains(&c));
            assert!((leaf_hidden_rho(p[i], fit.prior, c) - rho[i]).abs() < 1e-6);
        }
        assert!((0.0..=1.0).contains(&fit.prior));
    }

    #[test]
    fn infeasible_correlations_hit_the_box() {
        let p = [0.5, 0.5];
        let (fit, ok) = fit_hidden_node(&p, &[1.4, 0.2], &FitConfig::default());
        assert!(ok);
        assert!(fit.fit_residual > 0.0);
        assert!(fit.conditional.iter().all(|&(_, c)| (0.0..=1.0).contains(&c)));
        assert!(fit.prior > 0.0 && fit.prior < 1.0);
    }

    #[test]
    fn objective_never_increases_within_a_start() {
        let p = [0.2, 0.7, 0.4];
        let rho = [0.9, -0.5, 0.3];
        for run in fit_starts(&p, &rho, &FitConfig::default()) {
            for w in run.history.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }
}
