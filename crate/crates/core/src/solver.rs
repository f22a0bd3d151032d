//! Sparse direct solves.
//!
//! Factorization is delegated to faer's sparse LU (fill-reducing column
//! ordering, partial row pivoting). Every solve reports its relative residual.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::LuError;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use thiserror::Error;

use crate::sparse::CsrMatrix;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("right-hand side has length {got}, expected {expected}")]
    RhsLength { got: usize, expected: usize },
    #[error("matrix is structurally singular")]
    StructurallySingular,
    #[error("matrix is numerically singular (relative residual {0:e})")]
    NumericallySingular(f64),
    #[error("factorization failed: {0}")]
    Backend(String),
}

/// Relative residual above which a direct solve is treated as a singular system.
pub const SINGULAR_RESIDUAL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Solution {
    pub x: Vec<f64>,
    /// `||A x - b|| / ||b||` (absolute when `b = 0`).
    pub relative_residual: f64,
}

pub struct LuFactorization {
    matrix: CsrMatrix,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl std::fmt::Debug for LuFactorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LuFactorization")
            .field("n", &self.matrix.nrows())
            .field("nnz", &self.matrix.nnz())
            .finish()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl LuFactorization {
    pub fn new(matrix: &CsrMatrix) -> Result<Self, SolverError> {
        let n = matrix.nrows();
        if n != matrix.ncols() {
            return Err(SolverError::NotSquare {
                rows: n,
                cols: matrix.ncols(),
            });
        }
        let triplets: Vec<Triplet<usize, usize, f64>> = matrix
            .iter()
            .filter(|&(_, _, v)| v != 0.0)
            .map(|(i, j, v)| Triplet::new(i, j, v))
            .collect();
        let csc = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
            .map_err(|e| SolverError::Backend(format!("{e:?}")))?;
        let lu = csc.sp_lu().map_err(|e| match e {
            LuError::SymbolicSingular { .. } => SolverError::StructurallySingular,
            LuError::Generic(g) => SolverError::Backend(format!("{g:?}")),
        })?;
        Ok(LuFactorization {
            matrix: matrix.clone(),
            lu,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn raw_solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut b = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        self.lu.solve_in_place(b.as_mut());
        (0..rhs.len()).map(|i| b[(i, 0)]).collect()
    }

    fn residual(&self, x: &[f64], rhs: &[f64]) -> Vec<f64> {
        let ax = self.matrix.mul_vec(x);
        rhs.iter().zip(&ax).map(|(b, a)| b - a).collect()
    }

    /// Solves `A x = rhs` with one step of iterative refinement.
    pub fn solve(&self, rhs: &[f64]) -> Result<Solution, SolverError> {
        let n = self.dim();
        if rhs.len() != n {
            return Err(SolverError::RhsLength {
                got: rhs.len(),
                expected: n,
            });
        }
        let scale = norm(rhs);
        let denom = if scale > 0.0 { scale } else { 1.0 };
        let mut x = self.raw_solve(rhs);
        let r = self.residual(&x, rhs);
        let mut rel = norm(&r) / denom;
        if rel > 0.0 && rel.is_finite() {
            let dx = self.raw_solve(&r);
            let refined: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
            let rel2 = norm(&self.residual(&refined, rhs)) / denom;
            if rel2 < rel {
                x = refined;
                rel = rel2;
            }
        }
        if !rel.is_finite() || x.iter().any(|v| !v.is_finite()) || rel > SINGULAR_RESIDUAL {
            return Err(SolverError::NumericallySingular(rel));
        }
        Ok(Solution {
            x,
            relative_residual: rel,
        })
    }
}

/// One-shot factorize and solve.
pub fn sparse_solve(matrix: &CsrMatrix, rhs: &[f64]) -> Result<Solution, SolverError> {
    if rhs.len() != matrix.nrows() {
        return Err(SolverError::RhsLength {
            got: rhs.len(),
            expected: matrix.nrows(),
        });
    }
    LuFactorization::new(matrix)?.solve(rhs)
}
