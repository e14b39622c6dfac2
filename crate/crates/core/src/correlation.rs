//! Pairwise correlation matrices over binary variables.
//!
//! A [`CorrelationMatrix`] is the only input the structure search consumes.
//! It can be estimated from a [`SampleTable`] of 0/1 observations or loaded
//! from a precomputed file (see [`crate::io`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Symmetry tolerance applied before exact symmetrization.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Entries within this distance of ±1 are snapped to ±1.
pub const UNIT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrelationError {
    #[error("variable {0} is constant (marginal probability 0 or 1)")]
    DegenerateVariable(usize),
    #[error("ragged input: row {row} has {found} columns, expected {expected}")]
    ShapeError {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("entry at row {row}, column {col} is not 0 or 1")]
    NonBinary { row: usize, col: usize },
    #[error("need at least {min} rows, got {found}")]
    TooFewRows { min: usize, found: usize },
    #[error("matrix is not symmetric: |rho[{i}][{j}] - rho[{j}][{i}]| = {gap:e}")]
    AsymmetricMatrix { i: usize, j: usize, gap: f64 },
    #[error("entry ({i}, {j}) = {value} lies outside [-1, 1]")]
    OutOfRange { i: usize, j: usize, value: f64 },
    #[error("diagonal entry {i} = {value}, expected 1")]
    BadDiagonal { i: usize, value: f64 },
    #[error("marginal p[{i}] = {value} is not strictly inside (0, 1)")]
    BadMarginal { i: usize, value: f64 },
    #[error("need at least {min} variables, got {found}")]
    TooSmall { min: usize, found: usize },
}

/// Binary observations, one row per sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTable {
    n: usize,
    rows: Vec<Vec<u8>>,
}

impl SampleTable {
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self, CorrelationError> {
        if rows.is_empty() {
            return Err(CorrelationError::TooFewRows { min: 1, found: 0 });
        }
        let n = rows[0].len();
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(CorrelationError::ShapeError {
                    row: r,
                    found: row.len(),
                    expected: n,
                });
            }
            if let Some(c) = row.iter().position(|&v| v > 1) {
                return Err(CorrelationError::NonBinary { row: r, col: c });
            }
        }
        Ok(Self { n, rows })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }
}

/// Count smoothing applied while estimating correlations.
///
/// `laplace = k` adds `k` pseudo-counts to each cell of every 2×2 table.
/// The default is the plain maximum-likelihood estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub laplace: f64,
}

/// Symmetric matrix of pairwise correlations plus the marginals `p_i = P(x_i = 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    n: usize,
    rho: Vec<f64>,
    p: Vec<f64>,
}

impl CorrelationMatrix {
    /// Validates and builds a matrix from row-major entries.
    ///
    /// Asymmetry up to [`SYMMETRY_TOL`] is averaged away; entries within
    /// [`UNIT_TOL`] of ±1 are clamped.
    pub fn new(rho: Vec<Vec<f64>>, p: Vec<f64>) -> Result<Self, CorrelationError> {
        let n = rho.len();
        if n < 2 {
            return Err(CorrelationError::TooSmall { min: 2, found: n });
        }
        for (r, row) in rho.iter().enumerate() {
            if row.len() != n {
                return Err(CorrelationError::ShapeError {
                    row: r,
                    found: row.len(),
                    expected: n,
                });
            }
        }
        if p.len() != n {
            return Err(CorrelationError::ShapeError {
                row: n,
                found: p.len(),
                expected: n,
            });
        }
        for (i, &pi) in p.iter().enumerate() {
            if !(pi > 0.0 && pi < 1.0) {
                return Err(CorrelationError::BadMarginal { i, value: pi });
            }
        }
        for i in 0..n {
            for j in 0..n {
                let v = rho[i][j];
                if !v.is_finite() || v.abs() > 1.0 + UNIT_TOL {
                    return Err(CorrelationError::OutOfRange { i, j, value: v });
                }
            }
            if (rho[i][i] - 1.0).abs() > UNIT_TOL {
                return Err(CorrelationError::BadDiagonal {
                    i,
                    value: rho[i][i],
                });
            }
        }
        let mut flat = vec![0.0; n * n];
        for i in 0..n {
            flat[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let gap = (rho[i][j] - rho[j][i]).abs();
                if gap > SYMMETRY_TOL {
                    return Err(CorrelationError::AsymmetricMatrix { i, j, gap });
                }
                let v = snap_unit(0.5 * (rho[i][j] + rho[j][i]));
                flat[i * n + j] = v;
                flat[j * n + i] = v;
            }
        }
        Ok(Self { n, rho: flat, p })
    }

    /// Like [`CorrelationMatrix::new`] but additionally enforces the `n ≥ 3`
    /// floor required by decomposition.
    pub fn for_decomposition(rho: Vec<Vec<f64>>, p: Vec<f64>) -> Result<Self, CorrelationError> {
        if rho.len() < 3 {
            return Err(CorrelationError::TooSmall {
                min: 3,
                found: rho.len(),
            });
        }
        Self::new(rho, p)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn rho(&self, i: usize, j: usize) -> f64 {
        self.rho[i * self.n + j]
    }

    pub fn marginals(&self) -> &[f64] {
        &self.p
    }

    pub fn marginal(&self, i: usize) -> f64 {
        self.p[i]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.rho.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    /// Off-diagonal pairs `(i, j)`, `i < j`, whose correlation is exactly ±1.
    pub fn unit_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.rho(i, j).abs() == 1.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Relabels variables: entry `(perm[i], perm[j])` of the result equals `(i, j)` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n, "permutation length mismatch");
        let n = self.n;
        let mut rho = vec![0.0; n * n];
        let mut p = vec![0.0; n];
        for i in 0..n {
            p[perm[i]] = self.p[i];
            for j in 0..n {
                rho[perm[i] * n + perm[j]] = self.rho(i, j);
            }
        }
        Self { n, rho, p }
    }

    /// Replaces off-diagonal entries, keeping the marginals. Caller guarantees validity.
    pub(crate) fn from_parts_unchecked(n: usize, rho: Vec<f64>, p: Vec<f64>) -> Self {
        debug_assert_eq!(rho.len(), n * n);
        Self { n, rho, p }
    }
}

fn snap_unit(v: f64) -> f64 {
    if (v.abs() - 1.0).abs() <= UNIT_TOL {
        v.signum()
    } else {
        v
    }
}

/// Estimates correlations and marginals from empirical frequencies.
pub fn compute_correlations(samples: &SampleTable) -> Result<CorrelationMatrix, CorrelationError> {
    compute_correlations_with(samples, Smoothing::default())
}

pub fn compute_correlations_with(
    samples: &SampleTable,
    smoothing: Smoothing,
) -> Result<CorrelationMatrix, CorrelationError> {
    let rows = samples.row_count();
    if rows < 2 {
        return Err(CorrelationError::TooFewRows { min: 2, found: rows });
    }
    let n = samples.n();
    if n < 2 {
        return Err(CorrelationError::TooSmall { min: 2, found: n });
    }
    let k = smoothing.laplace.max(0.0);

    let mut ones = vec![0u64; n];
    let mut both = vec![0u64; n * n];
    for row in samples.rows() {
        let on: Vec<usize> = (0..n).filter(|&i| row[i] == 1).collect();
        for &i in &on {
            ones[i] += 1;
        }
        for (a, &i) in on.iter().enumerate() {
            for &j in &on[a + 1..] {
                both[i * n + j] += 1;
            }
        }
    }
    for (i, &c) in ones.iter().enumerate() {
        if c == 0 || c as usize == rows {
            return Err(CorrelationError::DegenerateVariable(i));
        }
    }

    let total = rows as f64 + 4.0 * k;
    let p: Vec<f64> = ones.iter().map(|&c| (c as f64 + 2.0 * k) / total).collect();
    let mut rho = vec![0.0; n * n];
    for i in 0..n {
        rho[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let pij = (both[i * n + j] as f64 + k) / total;
            let denom = (p[i] * (1.0 - p[i]) * p[j] * (1.0 - p[j])).sqrt();
            let v = snap_unit(((pij - p[i] * p[j]) / denom).clamp(-1.0, 1.0));
            rho[i * n + j] = v;
            rho[j * n + i] = v;
        }
    }
    Ok(CorrelationMatrix::from_parts_unchecked(n, rho, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[&[u8]]) -> SampleTable {
        SampleTable::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn identical_columns_are_perfectly_correlated() {
        let t = table(&[&[1, 1], &[1, 1], &[1, 1], &[0, 0], &[0, 0], &[0, 0]]);
        let m = compute_correlations(&t).unwrap();
        assert_eq!(m.rho(0, 1), 1.0);
        assert_eq!(m.unit_pairs(), vec![(0, 1)]);
    }

    #[test]
    fn balanced_table_is_independent() {
        let t = table(&[&[0, 0], &[0, 1], &[1, 0], &[1, 1]]);
        let m = compute_correlations(&t).unwrap();
        assert_eq!(m.rho(0, 1), 0.0);
        assert_eq!(m.marginals(), &[0.5, 0.5]);
    }

    #[test]
    fn hand_evaluated_half_correlation() {
        let mut rows: Vec<Vec<u8>> = Vec::new();
        rows.extend(std::iter::repeat_n(vec![1, 1], 3));
        rows.push(vec![1, 0]);
        rows.push(vec![0, 1]);
        rows.extend(std::iter::repeat_n(vec![0, 0], 3));
        let m = compute_correlations(&SampleTable::new(rows).unwrap()).unwrap();
        assert!((m.rho(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_column_is_rejected() {
        let t = table(&[&[0, 1], &[1, 1], &[0, 1]]);
        assert_eq!(
            compute_correlations(&t),
            Err(CorrelationError::DegenerateVariable(1))
        );
    }

    #[test]
    fn ragged_and_nonbinary_rows_are_rejected() {
        assert!(matches!(
            SampleTable::new(vec![vec![0, 1], vec![1]]),
            Err(CorrelationError::ShapeError { row: 1, .. })
        ));
        assert!(matches!(
            SampleTable::new(vec![vec![0, 2]]),
            Err(CorrelationError::NonBinary { row: 0, col: 1 })
        ));
    }

    #[test]
    fn single_row_is_too_few() {
        let t = table(&[&[0, 1]]);
        assert!(matches!(
            compute_correlations(&t),
            Err(CorrelationError::TooFewRows { .. })
        ));
    }

    #[test]
    fn laplace_smoothing_shrinks_towards_zero() {
        let t = table(&[&[1, 1], &[1, 1], &[0, 0], &[0, 0]]);
        let raw = compute_correlations(&t).unwrap();
        let smooth = compute_correlations_with(&t, Smoothing { laplace: 1.0 }).unwrap();
        assert_eq!(raw.rho(0, 1), 1.0);
        // counts become n11 = 3, n00 = 3, n10 = n01 = 1 over 8
        assert!((smooth.rho(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matrix_validation() {
        let ok = CorrelationMatrix::for_decomposition(
            vec![
                vec![1.0, 0.5, 0.5],
                vec![0.5, 1.0, 0.5],
                vec![0.5, 0.5, 1.0],
            ],
            vec![0.5; 3],
        );
        assert!(ok.is_ok());

        let asym = CorrelationMatrix::new(
            vec![
                vec![1.0, 0.5, 0.0],
                vec![0.6, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            vec![0.5; 3],
        );
        assert!(matches!(asym, Err(CorrelationError::AsymmetricMatrix { i: 0, j: 1, .. })));

        let small = CorrelationMatrix::for_decomposition(
            vec![vec![1.0, 0.2], vec![0.2, 1.0]],
            vec![0.5; 2],
        );
        assert!(matches!(small, Err(CorrelationError::TooSmall { min: 3, found: 2 })));

        let range = CorrelationMatrix::new(vec![vec![1.0, 1.1], vec![1.1, 1.0]], vec![0.5; 2]);
        assert!(matches!(range, Err(CorrelationError::OutOfRange { .. })));

        let marg = CorrelationMatrix::new(vec![vec![1.0, 0.1], vec![0.1, 1.0]], vec![0.5, 1.0]);
        assert!(matches!(marg, Err(CorrelationError::BadMarginal { i: 1, .. })));
    }

    #[test]
    fn near_symmetric_input_is_averaged_and_snapped() {
        let m = CorrelationMatrix::new(
            vec![vec![1.0, 0.3 + 4e-13], vec![0.3, 1.0]],
            vec![0.4, 0.6],
        )
        .unwrap();
        assert_eq!(m.rho(0, 1), m.rho(1, 0));
        assert!((m.rho(0, 1) - 0.3).abs() < 1e-12);

        let m = CorrelationMatrix::new(
            vec![vec![1.0, 1.0 + 5e-13], vec![1.0 + 5e-13, 1.0]],
            vec![0.4, 0.6],
        )
        .unwrap();
        assert_eq!(m.rho(0, 1), 1.0);
    }
}
