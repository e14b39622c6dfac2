//! Greedy minimum-error structure search.
//!
//! Starting from all variables independent, each step scores every legal
//! combination (pair/pair, pair/tree, tree/tree, node/tree) by its quartet
//! error, applies the cheapest one, and repeats until a single tree covers
//! every variable.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::CorrelationMatrix;
use crate::quartet::{
    node_tree_error, pair_pair_error, pair_tree_error, tree_tree_error, ErrorMode, ErrorReport,
    QuadOracle, QuadTable, QuartetError,
};
use crate::tree::{DecompTree, ForestState, NodeId, TreeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Stage1Error {
    #[error("need at least 3 variables, got {0}")]
    TooSmall(usize),
    #[error("no legal combination from a state with {independent} independent nodes and {trees} trees")]
    NoCandidates { independent: usize, trees: usize },
    #[error("candidate list is empty")]
    EmptyCandidateList,
    #[error("search stuck with {independent} independent nodes and {trees} trees")]
    StuckState { independent: usize, trees: usize },
    #[error("three-variable input is not star-realizable: {0}")]
    NotStarRealizable(String),
    #[error("trace step {step} does not replay: {reason}")]
    ReplayMismatch { step: usize, reason: String },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Quartet(#[from] QuartetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    TreeTree,
    PairTree,
    PairPair,
    NodeTree,
}

impl CandidateKind {
    /// Position in the default precedence order (lower wins).
    fn precedence(self) -> u8 {
        match self {
            CandidateKind::TreeTree => 0,
            CandidateKind::PairTree => 1,
            CandidateKind::PairPair => 2,
            CandidateKind::NodeTree => 3,
        }
    }
}

/// What a candidate combines. Trees are named by the id of their root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Participants {
    PairPair { pairs: [[usize; 2]; 2] },
    PairTree { pair: [usize; 2], tree: NodeId },
    TreeTree { trees: [NodeId; 2] },
    NodeTree { node: usize, tree: NodeId },
}

impl Participants {
    pub fn kind(&self) -> CandidateKind {
        match self {
            Participants::PairPair { .. } => CandidateKind::PairPair,
            Participants::PairTree { .. } => CandidateKind::PairTree,
            Participants::TreeTree { .. } => CandidateKind::TreeTree,
            Participants::NodeTree { .. } => CandidateKind::NodeTree,
        }
    }

    fn sorted_ids(&self) -> Vec<usize> {
        let mut ids = match *self {
            Participants::PairPair { pairs } => vec![pairs[0][0], pairs[0][1], pairs[1][0], pairs[1][1]],
            Participants::PairTree { pair, tree } => vec![pair[0], pair[1], tree],
            Participants::TreeTree { trees } => trees.to_vec(),
            Participants::NodeTree { node, tree } => vec![node, tree],
        };
        ids.sort_unstable();
        ids
    }

    /// Applies the matching combination.
    pub fn apply(&self, state: &ForestState) -> Result<ForestState, TreeError> {
        match *self {
            Participants::PairPair { pairs: [[i, j], [k, l]] } => state.combine_pair_pair(i, j, k, l),
            Participants::PairTree { pair: [i, j], tree } => state.combine_pair_tree(i, j, tree),
            Participants::TreeTree { trees: [a, b] } => state.combine_tree_tree(a, b),
            Participants::NodeTree { node, tree } => state.combine_node_tree(node, tree),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(flatten)]
    pub participants: Participants,
    pub error: ErrorReport,
}

impl Candidate {
    pub fn kind(&self) -> CandidateKind {
        self.participants.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// tree/tree, then pair/tree, then pair/pair, then node/tree.
    #[default]
    Precedence,
    /// Smallest deviation at the witness quartet.
    FinestQuad,
    /// Sorted participant ids.
    Lexicographic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub error_mode: ErrorMode,
    pub tie_policy: TiePolicy,
    /// Errors within this distance of the minimum are ties.
    pub epsilon_tie: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            error_mode: ErrorMode::Max,
            tie_policy: TiePolicy::Precedence,
            epsilon_tie: 1e-12,
        }
    }
}

/// One applied combination and the forest it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub chosen: Candidate,
    /// Root id of the tree the step created.
    pub new_tree: NodeId,
    pub independent: Vec<usize>,
    /// Leaf sets of the trees after the step, keyed by root id.
    pub trees: Vec<(NodeId, Vec<usize>)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Trace {
    pub n: usize,
    pub steps: Vec<TraceStep>,
}

/// Result of [`decompose`].
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// The rooted tree exactly as assembled by the combinations.
    pub tree: DecompTree,
    pub trace: Stage1Trace,
    /// Quartet deviations evaluated: memo fill plus candidate scoring lookups.
    pub quad_evaluations: u64,
}

/// Every legal combination from `state`, each scored.
pub fn enumerate_candidates<Q: QuadOracle + Sync + ?Sized>(
    state: &ForestState,
    quads: &Q,
    cfg: &Stage1Config,
) -> Result<Vec<Candidate>, Stage1Error> {
    let free: Vec<usize> = state.independent().iter().copied().collect();
    let trees: Vec<(NodeId, &DecompTree)> = state.trees().iter().map(|(&id, t)| (id, t)).collect();

    let mut specs: Vec<Participants> = Vec::new();
    let pairs: Vec<[usize; 2]> = free
        .iter()
        .enumerate()
        .flat_map(|(a, &i)| free[a + 1..].iter().map(move |&j| [i, j]))
        .collect();
    if free.len() >= 4 {
        for (x, p) in pairs.iter().enumerate() {
            for q in &pairs[x + 1..] {
                if p[0] != q[0] && p[0] != q[1] && p[1] != q[0] && p[1] != q[1] {
                    specs.push(Participants::PairPair { pairs: [*p, *q] });
                }
            }
        }
    }
    for &(id, t) in &trees {
        if t.leaf_set().len() >= 2 {
            specs.extend(pairs.iter().map(|&pair| Participants::PairTree { pair, tree: id }));
        }
    }
    for (x, &(a, ta)) in trees.iter().enumerate() {
        for &(b, tb) in &trees[x + 1..] {
            if ta.leaf_set().len() >= 2 && tb.leaf_set().len() >= 2 {
                specs.push(Participants::TreeTree { trees: [a, b] });
            }
        }
    }
    for &(id, t) in &trees {
        if t.leaf_set().len() >= 3 {
            specs.extend(free.iter().map(|&node| Participants::NodeTree { node, tree: id }));
        }
    }
    if specs.is_empty() {
        return Err(Stage1Error::NoCandidates {
            independent: free.len(),
            trees: trees.len(),
        });
    }

    let mode = cfg.error_mode;
    specs
        .into_par_iter()
        .map(|participants| {
            let error = match participants {
                Participants::PairPair { pairs: [[i, j], [k, l]] } => pair_pair_error(quads, i, j, k, l),
                Participants::PairTree { pair: [i, j], tree } => {
                    pair_tree_error(quads, i, j, state.tree(tree)?, mode)?
                }
                Participants::TreeTree { trees: [a, b] } => {
                    tree_tree_error(quads, state.tree(a)?, state.tree(b)?, mode)?
                }
                Participants::NodeTree { node, tree } => node_tree_error(quads, node, state.tree(tree)?)?,
            };
            Ok(Candidate { participants, error })
        })
        .collect()
}

fn tie_order(a: &Candidate, b: &Candidate, policy: TiePolicy) -> Ordering {
    let primary = match policy {
        TiePolicy::Precedence => a.kind().precedence().cmp(&b.kind().precedence()),
        TiePolicy::FinestQuad => a.error.witness_value.total_cmp(&b.error.witness_value),
        TiePolicy::Lexicographic => Ordering::Equal,
    };
    primary
        .then_with(|| a.participants.sorted_ids().cmp(&b.participants.sorted_ids()))
        .then_with(|| a.kind().precedence().cmp(&b.kind().precedence()))
}

/// The minimum-error candidate; near-ties resolved by the configured policy.
pub fn select_candidate<'c>(cands: &'c [Candidate], cfg: &Stage1Config) -> Result<&'c Candidate, Stage1Error> {
    let min = cands
        .iter()
        .map(|c| c.error.value)
        .min_by(f64::total_cmp)
        .ok_or(Stage1Error::EmptyCandidateList)?;
    let limit = min + cfg.epsilon_tie;
    Ok(cands
        .iter()
        .filter(|c| c.error.value <= limit)
        .min_by(|a, b| tie_order(a, b, cfg.tie_policy))
        .expect("the minimum is tied with itself"))
}

fn summarize(state: &ForestState, chosen: Candidate, new_tree: NodeId) -> TraceStep {
    TraceStep {
        chosen,
        new_tree,
        independent: state.independent().iter().copied().collect(),
        trees: state
            .trees()
            .iter()
            .map(|(&id, t)| (id, t.leaf_set().iter().copied().collect()))
            .collect(),
    }
}

/// Star tree over three variables with its edge correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct StarDecomposition {
    pub tree: DecompTree,
    /// Correlation between each leaf and the hidden centre, in variable order.
    pub edge_rho: [f64; 3],
}

/// The unique one-hidden-node tree over three variables.
///
/// Solves `rho_ij = rho_iw * rho_jw` for the three leaf edges.
pub fn star_decompose_3(m: &CorrelationMatrix) -> Result<StarDecomposition, Stage1Error> {
    if m.n() != 3 {
        return Err(Stage1Error::NotStarRealizable(format!("expected 3 variables, got {}", m.n())));
    }
    let (r01, r02, r12) = (m.rho(0, 1), m.rho(0, 2), m.rho(1, 2));
    let triple = r01 * r02 * r12;
    if triple <= 0.0 {
        return Err(Stage1Error::NotStarRealizable(format!(
            "product of pairwise correlations is {triple}, must be positive"
        )));
    }
    let mag = [
        (r01 * r02 / r12).abs().sqrt(),
        (r01 * r12 / r02).abs().sqrt(),
        (r02 * r12 / r01).abs().sqrt(),
    ];
    if let Some(i) = mag.iter().position(|&v| v > 1.0 + 1e-12) {
        return Err(Stage1Error::NotStarRealizable(format!(
            "edge correlation of variable {i} would be {}",
            mag[i]
        )));
    }
    // leaf 0 positive; the others follow the sign of their correlation with it
    let edge_rho = [mag[0], mag[1] * r01.signum(), mag[2] * r02.signum()];
    Ok(StarDecomposition {
        tree: DecompTree::star(3, &[0, 1, 2]),
        edge_rho,
    })
}

/// Runs the greedy search to completion.
pub fn decompose(m: &CorrelationMatrix, cfg: &Stage1Config) -> Result<Decomposition, Stage1Error> {
    let n = m.n();
    if n < 3 {
        return Err(Stage1Error::TooSmall(n));
    }
    if n == 3 {
        let star = star_decompose_3(m)?;
        return Ok(Decomposition {
            tree: star.tree,
            trace: Stage1Trace { n, steps: Vec::new() },
            quad_evaluations: 0,
        });
    }

    let quads = QuadTable::new(m);
    let mut state = ForestState::new(n);
    let mut steps = Vec::new();
    while !state.is_complete() {
        let cands = match enumerate_candidates(&state, &quads, cfg) {
            Ok(c) => c,
            Err(Stage1Error::NoCandidates { independent, trees }) => {
                return Err(Stage1Error::StuckState { independent, trees })
            }
            Err(e) => return Err(e),
        };
        let chosen = select_candidate(&cands, cfg)?.clone();
        state = chosen.participants.apply(&state)?;
        // every combination allocates its new root last
        let new_tree = state.next_hidden_id() - 1;
        steps.push(summarize(&state, chosen, new_tree));
    }
    let tree = state.trees().values().next().cloned().expect("complete state holds one tree");
    Ok(Decomposition {
        tree,
        trace: Stage1Trace { n, steps },
        quad_evaluations: quads.precomputed() + quads.lookups(),
    })
}

/// Outcome of re-scoring every traced step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayReport {
    pub steps: usize,
    /// Largest `chosen.error - min(alternatives)` seen; `<= epsilon_tie` means greedy held.
    pub max_excess: f64,
}

/// Re-enumerates candidates at each traced state and measures how far each
/// chosen candidate sits above the best alternative.
pub fn replay(m: &CorrelationMatrix, trace: &Stage1Trace, cfg: &Stage1Config) -> Result<ReplayReport, Stage1Error> {
    let mut state = ForestState::new(m.n());
    let mut max_excess = f64::NEG_INFINITY;
    for (step, s) in trace.steps.iter().enumerate() {
        let cands = enumerate_candidates(&state, m, cfg)?;
        let Some(found) = cands.iter().find(|c| c.participants == s.chosen.participants) else {
            return Err(Stage1Error::ReplayMismatch {
                step,
                reason: "chosen candidate is not legal in the replayed state".into(),
            });
        };
        let best = cands.iter().map(|c| c.error.value).fold(f64::INFINITY, f64::min);
        max_excess = max_excess.max(found.error.value - best);
        state = s.chosen.participants.apply(&state)?;
        if state.independent().iter().copied().collect::<Vec<_>>() != s.independent {
            return Err(Stage1Error::ReplayMismatch {
                step,
                reason: "independent set differs after applying".into(),
            });
        }
    }
    Ok(ReplayReport {
        steps: trace.steps.len(),
        max_excess: if trace.steps.is_empty() { 0.0 } else { max_excess },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix3(r01: f64, r02: f64, r12: f64) -> CorrelationMatrix {
        CorrelationMatrix::new(
            vec![vec![1.0, r01, r02], vec![r01, 1.0, r12], vec![r02, r12, 1.0]],
            vec![0.5; 3],
        )
        .unwrap()
    }

    fn flat(n: usize, v: f64) -> CorrelationMatrix {
        let rho = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { v }).collect())
            .collect();
        CorrelationMatrix::new(rho, vec![0.5; n]).unwrap()
    }

    fn cand(p: Participants, value: f64) -> Candidate {
        Candidate {
            participants: p,
            error: ErrorReport {
                value,
                witness: [0, 1, 2, 3],
                witness_value: value,
                terms: 1,
            },
        }
    }

    #[test]
    fn star_of_equal_correlations() {
        let s = star_decompose_3(&matrix3(0.25, 0.25, 0.25)).unwrap();
        for v in s.edge_rho {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert_eq!(s.tree.internal_count(), 1);
    }

    #[test]
    fn star_of_distinct_correlations() {
        let s = star_decompose_3(&matrix3(0.72, 0.48, 0.54)).unwrap();
        let expect = [0.8, 0.9, 0.6];
        for (v, e) in s.edge_rho.iter().zip(expect) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
    }

    #[test]
    fn star_signs_reproduce_pairwise_signs() {
        let s = star_decompose_3(&matrix3(-0.72, 0.48, -0.54)).unwrap();
        let e = s.edge_rho;
        assert!((e[0] * e[1] + 0.72).abs() < 1e-12);
        assert!((e[0] * e[2] - 0.48).abs() < 1e-12);
        assert!((e[1] * e[2] + 0.54).abs() < 1e-12);
    }

    #[test]
    fn star_rejects_unrealizable() {
        assert!(matches!(
            star_decompose_3(&matrix3(1.0, 1.0, 0.5)),
            Err(Stage1Error::NotStarRealizable(_))
        ));
        assert!(matches!(
            star_decompose_3(&matrix3(-0.5, 0.5, 0.5)),
            Err(Stage1Error::NotStarRealizable(_))
        ));
        assert!(matches!(
            star_decompose_3(&matrix3(0.0, 0.5, 0.5)),
            Err(Stage1Error::NotStarRealizable(_))
        ));
    }

    #[test]
    fn decompose_three_is_a_star() {
        let d = decompose(&matrix3(0.72, 0.48, 0.54), &Stage1Config::default()).unwrap();
        assert_eq!(d.tree.internal_count(), 1);
        assert_eq!(d.tree.leaf_set().len(), 3);
        assert!(d.trace.steps.is_empty());
    }

    #[test]
    fn decompose_rejects_two() {
        let m = CorrelationMatrix::new(vec![vec![1.0, 0.5], vec![0.5, 1.0]], vec![0.5; 2]).unwrap();
        assert_eq!(decompose(&m, &Stage1Config::default()).unwrap_err(), Stage1Error::TooSmall(2));
    }

    #[test]
    fn candidate_counts() {
        let cfg = Stage1Config::default();
        let m = flat(6, 0.3);
        let four = ForestState::new(4);
        assert_eq!(enumerate_candidates(&four, &flat(4, 0.3), &cfg).unwrap().len(), 3);
        let six = ForestState::new(6);
        let c = enumerate_candidates(&six, &m, &cfg).unwrap();
        assert_eq!(c.len(), 45);
        assert!(c.iter().all(|c| c.kind() == CandidateKind::PairPair));

        let five = ForestState::new(5).combine_pair_pair(0, 1, 2, 3).unwrap();
        let c = enumerate_candidates(&five, &flat(5, 0.3), &cfg).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].kind(), CandidateKind::NodeTree);
    }

    #[test]
    fn selection_rules() {
        let cfg = Stage1Config::default();
        assert_eq!(select_candidate(&[], &cfg).unwrap_err(), Stage1Error::EmptyCandidateList);

        let tt = cand(Participants::TreeTree { trees: [10, 11] }, 0.2);
        let pp = cand(Participants::PairPair { pairs: [[0, 1], [2, 3]] }, 0.2);
        let low = cand(Participants::NodeTree { node: 4, tree: 10 }, 0.1);

        assert_eq!(select_candidate(std::slice::from_ref(&pp), &cfg).unwrap(), &pp);
        for policy in [TiePolicy::Precedence, TiePolicy::FinestQuad, TiePolicy::Lexicographic] {
            let cfg = Stage1Config { tie_policy: policy, ..cfg };
            assert_eq!(select_candidate(&[tt.clone(), low.clone(), pp.clone()], &cfg).unwrap(), &low);
        }
        assert_eq!(select_candidate(&[pp.clone(), tt.clone()], &cfg).unwrap(), &tt);
        let lex = Stage1Config { tie_policy: TiePolicy::Lexicographic, ..cfg };
        assert_eq!(select_candidate(&[tt.clone(), pp.clone()], &lex).unwrap(), &pp);
    }

    #[test]
    fn near_ties_respect_epsilon() {
        let cfg = Stage1Config::default();
        let tt = cand(Participants::TreeTree { trees: [10, 11] }, 1e-13);
        let pp = cand(Participants::PairPair { pairs: [[0, 1], [2, 3]] }, 0.0);
        assert_eq!(select_candidate(&[pp.clone(), tt.clone()], &cfg).unwrap(), &tt);
        let strict = Stage1Config { epsilon_tie: 0.0, ..cfg };
        assert_eq!(select_candidate(&[pp.clone(), tt], &strict).unwrap(), &pp);
    }

    #[test]
    fn trace_json_round_trips() {
        let m = flat(6, 0.4);
        let d = decompose(&m, &Stage1Config::default()).unwrap();
        let text = serde_json::to_string(&d.trace).unwrap();
        let back: Stage1Trace = serde_json::from_str(&text).unwrap();
        assert_eq!(back, d.trace);
        assert!(d.trace.steps.len() <= 5);
        let last = d.trace.steps.last().unwrap();
        assert_eq!(last.trees.len(), 1);
        assert_eq!(last.trees[0].0, last.new_tree);
        assert_eq!(d.tree.root(), last.new_tree);
    }

    #[test]
    fn replay_accepts_own_trace_and_rejects_tampering() {
        let m = flat(7, 0.35);
        let cfg = Stage1Config::default();
        let d = decompose(&m, &cfg).unwrap();
        let r = replay(&m, &d.trace, &cfg).unwrap();
        assert!(r.max_excess <= cfg.epsilon_tie);
        let mut bad = d.trace.clone();
        bad.steps.swap(0, 1);
        assert!(replay(&m, &bad, &cfg).is_err());
    }
}
