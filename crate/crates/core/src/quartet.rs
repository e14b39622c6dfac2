//! Quartet errors between independent nodes, node pairs and trees.
//!
//! Every error is built from the tetrad deviation
//! `|rho_ik * rho_jl - rho_il * rho_jk|` of a quartet split `ij | kl`.
//! The value is invariant under `i <-> j`, under `k <-> l`, and under
//! swapping the two pairs, so each unordered pairing is evaluated once.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::CorrelationMatrix;
use crate::tree::DecompTree;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QuartetError {
    #[error("quartet indices must be distinct and below {n}: {quad:?}")]
    IndexError { quad: [usize; 4], n: usize },
    #[error("tree has {found} leaves, need at least {min}")]
    TreeTooSmall { min: usize, found: usize },
    #[error("trees share leaf {0}")]
    OverlappingTrees(usize),
    #[error("variable {0} already belongs to the tree")]
    NodeInTree(usize),
}

/// How per-quartet deviations are aggregated for pair/tree and tree/tree errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMode {
    #[default]
    Max,
    Mean,
}

/// An aggregated error together with the quartet that attains (or, in mean
/// mode, contributes most to) it. The witness is ordered as a split
/// `witness[0] witness[1] | witness[2] witness[3]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub value: f64,
    pub witness: [usize; 4],
    /// Deviation at the witness quartet.
    pub witness_value: f64,
    /// Number of quartet terms aggregated.
    pub terms: usize,
}

/// Source of quartet deviations.
pub trait QuadOracle {
    fn n(&self) -> usize;
    /// `|rho_ik rho_jl - rho_il rho_jk|`; indices are assumed distinct and in range.
    fn quad(&self, i: usize, j: usize, k: usize, l: usize) -> f64;
}

#[inline]
fn tetrad(m: &CorrelationMatrix, i: usize, j: usize, k: usize, l: usize) -> f64 {
    (m.rho(i, k) * m.rho(j, l) - m.rho(i, l) * m.rho(j, k)).abs()
}

impl QuadOracle for CorrelationMatrix {
    fn n(&self) -> usize {
        CorrelationMatrix::n(self)
    }

    fn quad(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        tetrad(self, i, j, k, l)
    }
}

/// Pairs beyond this many variables are not memoized.
const MEMO_LIMIT: usize = 96;

/// All quartet deviations computed once up front, with an evaluation counter.
///
/// The table is indexed by unordered pairs: entry `(pair(i, j), pair(k, l))`
/// holds the deviation of split `ij | kl`.
pub struct QuadTable<'a> {
    matrix: &'a CorrelationMatrix,
    pairs: usize,
    memo: Option<Vec<f64>>,
    lookups: AtomicU64,
    computed: u64,
}

impl<'a> QuadTable<'a> {
    pub fn new(matrix: &'a CorrelationMatrix) -> Self {
        let n = matrix.n();
        let pairs = n * n.saturating_sub(1) / 2;
        let mut computed = 0;
        let memo = (n <= MEMO_LIMIT).then(|| {
            let mut table = vec![0.0; pairs * pairs];
            for i in 0..n {
                for j in (i + 1)..n {
                    let p = pair_index(n, i, j);
                    for k in 0..n {
                        for l in (k + 1)..n {
                            let q = pair_index(n, k, l);
                            if q < p || k == i || k == j || l == i || l == j {
                                continue;
                            }
                            let v = tetrad(matrix, i, j, k, l);
                            table[p * pairs + q] = v;
                            table[q * pairs + p] = v;
                            computed += 1;
                        }
                    }
                }
            }
            table
        });
        Self {
            matrix,
            pairs,
            memo,
            lookups: AtomicU64::new(0),
            computed,
        }
    }

    /// Deviations requested since construction.
    pub fn lookups(&self) -> u64 {
        self.lookups.load(Ordering::Relaxed)
    }

    /// Deviations evaluated while filling the table.
    pub fn precomputed(&self) -> u64 {
        self.computed
    }

    pub fn matrix(&self) -> &CorrelationMatrix {
        self.matrix
    }
}

impl QuadOracle for QuadTable<'_> {
    fn n(&self) -> usize {
        self.matrix.n()
    }

    fn quad(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.lookups.fetch_add(1, Ordering::Relaxed);
        match &self.memo {
            Some(t) => {
                let n = self.matrix.n();
                t[pair_index(n, i, j) * self.pairs + pair_index(n, k, l)]
            }
            None => tetrad(self.matrix, i, j, k, l),
        }
    }
}

#[inline]
fn pair_index(n: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    a * n - a * (a + 1) / 2 + (b - a - 1)
}

/// Checked deviation for the split `ij | kl`.
pub fn quad_error(
    m: &CorrelationMatrix,
    i: usize,
    j: usize,
    k: usize,
    l: usize,
) -> Result<f64, QuartetError> {
    let quad = [i, j, k, l];
    let n = m.n();
    let distinct = (0..4).all(|a| (a + 1..4).all(|b| quad[a] != quad[b]));
    if !distinct || quad.iter().any(|&v| v >= n) {
        return Err(QuartetError::IndexError { quad, n });
    }
    Ok(tetrad(m, i, j, k, l))
}

struct Accumulator {
    mode: ErrorMode,
    sum: f64,
    best: f64,
    witness: [usize; 4],
    terms: usize,
}

impl Accumulator {
    fn new(mode: ErrorMode) -> Self {
        Self {
            mode,
            sum: 0.0,
            best: f64::NEG_INFINITY,
            witness: [0; 4],
            terms: 0,
        }
    }

    #[inline]
    fn push(&mut self, v: f64, quad: [usize; 4]) {
        self.sum += v;
        self.terms += 1;
        if v > self.best {
            self.best = v;
            self.witness = quad;
        }
    }

    fn finish(self) -> ErrorReport {
        let value = match self.mode {
            ErrorMode::Max => self.best,
            ErrorMode::Mean => self.sum / self.terms as f64,
        };
        ErrorReport {
            value,
            witness: self.witness,
            witness_value: self.best,
            terms: self.terms,
        }
    }
}

fn leaves_of(t: &DecompTree, min: usize) -> Result<Vec<usize>, QuartetError> {
    let leaves: Vec<usize> = t.leaf_set().iter().copied().collect();
    if leaves.len() < min {
        return Err(QuartetError::TreeTooSmall {
            min,
            found: leaves.len(),
        });
    }
    Ok(leaves)
}

/// Error between two independent pairs: a single quartet term.
pub fn pair_pair_error<Q: QuadOracle + ?Sized>(q: &Q, i: usize, j: usize, k: usize, l: usize) -> ErrorReport {
    let value = q.quad(i, j, k, l);
    ErrorReport {
        value,
        witness: [i, j, k, l],
        witness_value: value,
        terms: 1,
    }
}

/// Error between pair `(i, j)` and tree `t`, over unordered leaf pairs of `t`.
pub fn pair_tree_error<Q: QuadOracle + ?Sized>(
    q: &Q,
    i: usize,
    j: usize,
    t: &DecompTree,
    mode: ErrorMode,
) -> Result<ErrorReport, QuartetError> {
    let leaves = leaves_of(t, 2)?;
    for v in [i, j] {
        if t.leaf_set().contains(&v) {
            return Err(QuartetError::NodeInTree(v));
        }
    }
    let mut acc = Accumulator::new(mode);
    for (a, &k) in leaves.iter().enumerate() {
        for &l in &leaves[a + 1..] {
            acc.push(q.quad(i, j, k, l), [i, j, k, l]);
        }
    }
    Ok(acc.finish())
}

/// Error between two disjoint trees, over unordered leaf pairs of each.
pub fn tree_tree_error<Q: QuadOracle + ?Sized>(
    q: &Q,
    t1: &DecompTree,
    t2: &DecompTree,
    mode: ErrorMode,
) -> Result<ErrorReport, QuartetError> {
    let a = leaves_of(t1, 2)?;
    let b = leaves_of(t2, 2)?;
    if let Some(&shared) = t1.leaf_set().intersection(t2.leaf_set()).next() {
        return Err(QuartetError::OverlappingTrees(shared));
    }
    let mut acc = Accumulator::new(mode);
    for (x, &i) in a.iter().enumerate() {
        for &j in &a[x + 1..] {
            for (y, &k) in b.iter().enumerate() {
                for &l in &b[y + 1..] {
                    acc.push(q.quad(i, j, k, l), [i, j, k, l]);
                }
            }
        }
    }
    Ok(acc.finish())
}

/// Error between independent node `i` and tree `t`: the largest deviation of
/// `i j | k l` over every triple `{j, k, l}` of leaves and all three choices
/// of the leaf paired with `i`.
pub fn node_tree_error<Q: QuadOracle + ?Sized>(
    q: &Q,
    i: usize,
    t: &DecompTree,
) -> Result<ErrorReport, QuartetError> {
    let leaves = leaves_of(t, 3)?;
    if t.leaf_set().contains(&i) {
        return Err(QuartetError::NodeInTree(i));
    }
    let mut acc = Accumulator::new(ErrorMode::Max);
    for (x, &a) in leaves.iter().enumerate() {
        for (y, &b) in leaves.iter().enumerate().skip(x + 1) {
            for &c in &leaves[y + 1..] {
                acc.push(q.quad(i, a, b, c), [i, a, b, c]);
                acc.push(q.quad(i, b, a, c), [i, b, a, c]);
                acc.push(q.quad(i, c, a, b), [i, c, a, b]);
            }
        }
    }
    Ok(acc.finish())
}

/// Largest deviation over every leaf quartet the tree resolves, taken at the
/// pairing the tree induces.
pub fn tree_quartet_error<Q: QuadOracle + ?Sized>(q: &Q, t: &DecompTree) -> f64 {
    let leaves: Vec<usize> = t.leaf_set().iter().copied().collect();
    let d = t.distance_table();
    let mut worst: f64 = 0.0;
    let n = leaves.len();
    for a in 0..n {
        for b in (a + 1)..n {
            for c in (b + 1)..n {
                for e in (c + 1)..n {
                    let quad = [leaves[a], leaves[b], leaves[c], leaves[e]];
                    if let Some([i, j, k, l]) = d.quartet_split(quad) {
                        worst = worst.max(q.quad(i, j, k, l));
                    }
                }
            }
        }
    }
    worst
}
