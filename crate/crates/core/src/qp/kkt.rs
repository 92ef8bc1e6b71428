//! Factorizations for saddle-point (KKT) systems with a positive-definite
//! Hessian block.
//!
//! Systems of the form
//!
//! ```text
//! [ H  Aᵀ ] [x]   [v]
//! [ A  0  ] [y] = [w]
//! ```
//!
//! are solved by block elimination: with `H = LLᵀ` (Cholesky) and the
//! Schur complement `S = A H⁻¹ Aᵀ` (positive definite whenever `A` has
//! full row rank), `y = S⁻¹ (A H⁻¹ v − w)` and `x = H⁻¹ (v − Aᵀ y)`.
//! Both factors are retained so repeated solves against the same system
//! cost only triangular substitutions.

use super::QpError;
use crate::signal::svd_rank;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use std::sync::Arc;

/// Relative symmetry tolerance for Hessian validation.
const SYMMETRY_RTOL: f64 = 1e-12;

/// Reject Hessians whose estimated eigenvalue ratio falls below this.
const DEGENERACY_RTOL: f64 = 1e-12;

/// Relative singular-value threshold for constraint-row rank estimates.
const ROW_RANK_RTOL: f64 = 1e-10;

/// A validated Cholesky factorization of a symmetric positive-definite
/// Hessian.
#[derive(Debug, Clone)]
pub struct HessianFactor {
    chol: Cholesky<f64, Dyn>,
    dim: usize,
}

impl HessianFactor {
    /// Validates symmetry, positive definiteness and conditioning, then
    /// factors `h`.
    ///
    /// Near-singular Hessians are rejected rather than regularized: the
    /// squared ratio of the extreme Cholesky diagonal entries is used as
    /// an eigenvalue-ratio estimate and must stay above `1e-12`.
    pub fn new(h: &DMatrix<f64>) -> Result<Self, QpError> {
        if h.nrows() != h.ncols() {
            return Err(QpError::DimensionMismatch(format!(
                "Hessian must be square, got {}x{}",
                h.nrows(),
                h.ncols()
            )));
        }
        let scale = h.amax();
        let mut deviation = 0.0f64;
        for i in 0..h.nrows() {
            for j in (i + 1)..h.ncols() {
                deviation = deviation.max((h[(i, j)] - h[(j, i)]).abs());
            }
        }
        if scale > 0.0 && deviation > SYMMETRY_RTOL * scale {
            return Err(QpError::NotSymmetric {
                deviation: deviation / scale,
            });
        }
        let chol = Cholesky::new(h.clone()).ok_or(QpError::NotPositiveDefinite)?;
        let diag = chol.l_dirty().diagonal();
        let mut dmin = f64::INFINITY;
        let mut dmax = 0.0f64;
        for &d in diag.iter() {
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
        let condition_estimate = if dmax > 0.0 {
            (dmin / dmax) * (dmin / dmax)
        } else {
            0.0
        };
        if condition_estimate < DEGENERACY_RTOL {
            return Err(QpError::DegenerateHessian { condition_estimate });
        }
        Ok(HessianFactor {
            dim: h.nrows(),
            chol,
        })
    }

    /// Hessian dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `H x = v`.
    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// Solves `H X = M` column-wise.
    pub fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(m)
    }
}

/// An owned factorization of the saddle-point system `[H Aᵀ; A 0]` for a
/// fixed constraint-row block `A` (possibly empty).
#[derive(Debug, Clone)]
pub struct KktFactorization {
    hessian: Arc<HessianFactor>,
    rows: DMatrix<f64>,
    /// `H⁻¹ Aᵀ`, cached for cheap repeated solves.
    h_inv_rows_t: DMatrix<f64>,
    /// Cholesky of the Schur complement `A H⁻¹ Aᵀ`; `None` when `A` has
    /// no rows.
    chol_s: Option<Cholesky<f64, Dyn>>,
}

impl KktFactorization {
    /// Factors the saddle-point system for a fresh Hessian.
    pub fn new(h: &DMatrix<f64>, rows: &DMatrix<f64>) -> Result<Self, QpError> {
        Self::from_hessian(Arc::new(HessianFactor::new(h)?), rows)
    }

    /// Factors the saddle-point system reusing an existing Hessian
    /// factorization.
    ///
    /// Fails with a rank-deficiency error when the Schur complement of the
    /// rows is not positive definite, i.e. the rows are linearly dependent
    /// (or nearly so); the error carries the singular-value rank estimate.
    pub fn from_hessian(
        hessian: Arc<HessianFactor>,
        rows: &DMatrix<f64>,
    ) -> Result<Self, QpError> {
        if rows.nrows() > 0 && rows.ncols() != hessian.dim() {
            return Err(QpError::DimensionMismatch(format!(
                "constraint rows have {} columns, Hessian dimension is {}",
                rows.ncols(),
                hessian.dim()
            )));
        }
        let rows = if rows.nrows() == 0 {
            DMatrix::zeros(0, hessian.dim())
        } else {
            rows.clone()
        };
        let h_inv_rows_t = if rows.nrows() == 0 {
            DMatrix::zeros(hessian.dim(), 0)
        } else {
            hessian.solve_mat(&rows.transpose())
        };
        let chol_s = if rows.nrows() == 0 {
            None
        } else {
            let mut s = &rows * &h_inv_rows_t;
            // Symmetrize against round-off before factoring.
            for i in 0..s.nrows() {
                for j in (i + 1)..s.ncols() {
                    let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
                    s[(i, j)] = avg;
                    s[(j, i)] = avg;
                }
            }
            // `Cholesky::new` can succeed on an exactly singular matrix when
            // round-off nudges a zero pivot positive, so also reject factors
            // whose pivot spread says the rows are (near-)dependent.
            let chol = Cholesky::new(s).filter(|c| {
                let diag = c.l_dirty().diagonal();
                let mut d_min = f64::INFINITY;
                let mut d_max = 0.0f64;
                for &d in diag.iter() {
                    d_min = d_min.min(d);
                    d_max = d_max.max(d);
                }
                d_max > 0.0 && (d_min / d_max) * (d_min / d_max) > DEGENERACY_RTOL
            });
            match chol {
                Some(c) => Some(c),
                None => {
                    let (estimated_rank, _) = svd_rank(&rows, ROW_RANK_RTOL);
                    return Err(QpError::RankDeficientConstraints {
                        estimated_rank,
                        rows: rows.nrows(),
                    });
                }
            }
        };
        Ok(KktFactorization {
            hessian,
            rows,
            h_inv_rows_t,
            chol_s,
        })
    }

    /// Number of constraint rows in the factored system.
    pub fn num_rows(&self) -> usize {
        self.rows.nrows()
    }

    /// The factored constraint-row block `A`.
    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    /// The underlying Hessian factorization.
    pub fn hessian(&self) -> &Arc<HessianFactor> {
        &self.hessian
    }

    /// Solves `[H Aᵀ; A 0] [x; y] = [v; w]`.
    pub fn solve(&self, v: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        debug_assert_eq!(v.len(), self.hessian.dim());
        debug_assert_eq!(w.len(), self.rows.nrows());
        let h_inv_v = self.hessian.solve_vec(v);
        match &self.chol_s {
            None => (h_inv_v, DVector::zeros(0)),
            Some(chol_s) => {
                let rhs = &self.rows * &h_inv_v - w;
                let y = chol_s.solve(&rhs);
                let x = h_inv_v - &self.h_inv_rows_t * &y;
                (x, y)
            }
        }
    }

    /// Solves the system for the special right-hand side `[v; 0]` and
    /// returns only the primal block.
    pub fn solve_primal(&self, v: &DVector<f64>) -> DVector<f64> {
        let zero = DVector::zeros(self.rows.nrows());
        self.solve(v, &zero).0
    }

    /// Solves `(A H⁻¹ Aᵀ) λ = rhs`; `None` when there are no rows.
    pub fn solve_schur(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        self.chol_s.as_ref().map(|chol_s| chol_s.solve(rhs))
    }

    /// Solves `[H Aᵀ; A 0] [X; Y] = [V; W]` column-by-column in one batch.
    pub fn solve_columns(
        &self,
        v: &DMatrix<f64>,
        w: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        debug_assert_eq!(v.nrows(), self.hessian.dim());
        debug_assert_eq!(w.nrows(), self.rows.nrows());
        debug_assert_eq!(v.ncols(), w.ncols());
        let h_inv_v = self.hessian.solve_mat(v);
        match &self.chol_s {
            None => (h_inv_v, DMatrix::zeros(0, v.ncols())),
            Some(chol_s) => {
                let rhs = &self.rows * &h_inv_v - w;
                let y = chol_s.solve(&rhs);
                let x = h_inv_v - &self.h_inv_rows_t * &y;
                (x, y)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut h = &a * a.transpose();
        for i in 0..n {
            h[(i, i)] += n as f64;
        }
        h
    }

    #[test]
    fn saddle_solve_matches_dense_lu_oracle() {
        let n = 20;
        let na = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = random_spd(n, 1);
        let a = DMatrix::from_fn(na, n, |_, _| rng.random_range(-1.0..1.0));
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(na, |_, _| rng.random_range(-1.0..1.0));

        let kkt = KktFactorization::new(&h, &a).unwrap();
        let (x, y) = kkt.solve(&v, &w);

        // Independent oracle: assemble the full (n+na) system and LU-solve.
        let mut full = DMatrix::zeros(n + na, n + na);
        full.view_mut((0, 0), (n, n)).copy_from(&h);
        full.view_mut((0, n), (n, na)).copy_from(&a.transpose());
        full.view_mut((n, 0), (na, n)).copy_from(&a);
        let mut rhs = DVector::zeros(n + na);
        rhs.rows_mut(0, n).copy_from(&v);
        rhs.rows_mut(n, na).copy_from(&w);
        let sol = full.lu().solve(&rhs).unwrap();

        for i in 0..n {
            assert_abs_diff_eq!(x[i], sol[i], epsilon = 1e-10);
        }
        for j in 0..na {
            assert_abs_diff_eq!(y[j], sol[n + j], epsilon = 1e-10);
        }
    }

    #[test]
    fn empty_row_block_reduces_to_hessian_solve() {
        let h = random_spd(6, 2);
        let kkt = KktFactorization::new(&h, &DMatrix::zeros(0, 6)).unwrap();
        let v = DVector::from_fn(6, |i, _| i as f64 - 2.5);
        let (x, y) = kkt.solve(&v, &DVector::zeros(0));
        assert_eq!(y.len(), 0);
        let residual = (&h * &x - &v).norm();
        assert!(residual < 1e-10, "residual {residual}");
    }

    #[test]
    fn dependent_rows_are_rejected_with_rank_estimate() {
        let h = random_spd(5, 3);
        let mut a = DMatrix::zeros(2, 5);
        a.row_mut(0).copy_from_slice(&[1.0, 2.0, 0.0, 0.0, 0.0]);
        a.row_mut(1).copy_from_slice(&[2.0, 4.0, 0.0, 0.0, 0.0]);
        match KktFactorization::new(&h, &a) {
            Err(QpError::RankDeficientConstraints {
                estimated_rank,
                rows,
            }) => {
                assert_eq!(estimated_rank, 1);
                assert_eq!(rows, 2);
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn asymmetric_hessian_is_rejected() {
        let mut h = random_spd(4, 4);
        h[(0, 1)] += 1e-3;
        assert!(matches!(
            HessianFactor::new(&h),
            Err(QpError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn indefinite_hessian_is_rejected() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            HessianFactor::new(&h),
            Err(QpError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn near_singular_hessian_is_rejected_not_regularized() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-14]));
        assert!(matches!(
            HessianFactor::new(&h),
            Err(QpError::DegenerateHessian { .. })
        ));
    }
}
