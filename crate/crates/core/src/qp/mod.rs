//! Dense strictly-convex quadratic programming.
//!
//! Problems have the form
//!
//! ```text
//! minimize    1/2 xᵀ H x + fᵀ x
//! subject to  G x ≤ h          (componentwise)
//! ```
//!
//! with `H` symmetric positive definite.  The solver is a primal
//! active-set method with a feasible-start phase 1, chosen because the
//! downstream sensitivity machinery needs the exact active set and its
//! Lagrange multipliers, not just the minimizer.  Multipliers follow the
//! stationarity convention `H x + f + Gᵀ μ = 0` with `μ ≥ 0`; for
//! equality-constrained solves ([`solve_equality_kkt`]) the convention is
//! `H x + f + Aᵀ ν = 0` with `ν` free.

mod kkt;
mod solver;

pub use kkt::{HessianFactor, KktFactorization};
pub use solver::{solve_qp, SolveSettings};

use nalgebra::{DMatrix, DVector};
use std::fmt;

/// Errors from quadratic-program assembly and solution.
#[derive(Debug)]
pub enum QpError {
    /// The Hessian deviates from symmetry by more than `1e-12` relative.
    NotSymmetric { deviation: f64 },
    /// Cholesky factorization failed: the Hessian is not positive
    /// definite.
    NotPositiveDefinite,
    /// The Hessian is positive definite but numerically singular
    /// (estimated eigenvalue ratio below `1e-12`); such problems signal a
    /// configuration bug and are rejected rather than regularized.
    DegenerateHessian { condition_estimate: f64 },
    /// Constraint rows are linearly dependent (or nearly so); carries the
    /// singular-value rank estimate.
    RankDeficientConstraints { estimated_rank: usize, rows: usize },
    /// No point satisfies all constraints; carries the smallest residual
    /// violation achieved by phase 1.
    Infeasible { max_violation: f64 },
    /// The active-set iteration did not converge; carries the last
    /// iterate and its stationarity residual.
    MaxIterations {
        iterations: usize,
        last_iterate: Box<DVector<f64>>,
        kkt_residual: f64,
    },
    /// Shapes of the problem pieces disagree.
    DimensionMismatch(String),
    /// An internal numerical failure not covered by the cases above.
    Numerical(String),
}

impl fmt::Display for QpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QpError::NotSymmetric { deviation } => {
                write!(f, "Hessian is not symmetric (relative deviation {deviation:.3e})")
            }
            QpError::NotPositiveDefinite => write!(f, "Hessian is not positive definite"),
            QpError::DegenerateHessian { condition_estimate } => write!(
                f,
                "Hessian is numerically singular (eigenvalue ratio estimate {condition_estimate:.3e})"
            ),
            QpError::RankDeficientConstraints {
                estimated_rank,
                rows,
            } => write!(
                f,
                "constraint rows are rank deficient: estimated rank {estimated_rank} of {rows} rows"
            ),
            QpError::Infeasible { max_violation } => write!(
                f,
                "constraints are infeasible (best achievable violation {max_violation:.3e})"
            ),
            QpError::MaxIterations {
                iterations,
                kkt_residual,
                ..
            } => write!(
                f,
                "active-set iteration failed to converge after {iterations} iterations \
                 (stationarity residual {kkt_residual:.3e})"
            ),
            QpError::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            QpError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

impl std::error::Error for QpError {}

/// A validated strictly-convex quadratic program.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    constraint_matrix: DMatrix<f64>,
    constraint_rhs: DVector<f64>,
}

impl QuadraticProgram {
    /// Validates shapes and Hessian symmetry.  Positive definiteness is
    /// established by factorization at solve time.
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constraint_matrix: DMatrix<f64>,
        constraint_rhs: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = hessian.nrows();
        if hessian.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "Hessian must be square, got {}x{}",
                hessian.nrows(),
                hessian.ncols()
            )));
        }
        if linear.len() != n {
            return Err(QpError::DimensionMismatch(format!(
                "linear term has length {}, expected {n}",
                linear.len()
            )));
        }
        if constraint_matrix.nrows() != constraint_rhs.len() {
            return Err(QpError::DimensionMismatch(format!(
                "constraint matrix has {} rows but right-hand side has {}",
                constraint_matrix.nrows(),
                constraint_rhs.len()
            )));
        }
        if constraint_matrix.nrows() > 0 && constraint_matrix.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "constraint matrix has {} columns, expected {n}",
                constraint_matrix.ncols()
            )));
        }
        let scale = hessian.amax();
        let mut deviation = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                deviation = deviation.max((hessian[(i, j)] - hessian[(j, i)]).abs());
            }
        }
        if scale > 0.0 && deviation > 1e-12 * scale {
            return Err(QpError::NotSymmetric {
                deviation: deviation / scale,
            });
        }
        Ok(QuadraticProgram {
            hessian,
            linear,
            constraint_matrix,
            constraint_rhs,
        })
    }

    /// Problem dimension.
    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    /// Number of inequality rows.
    pub fn num_constraints(&self) -> usize {
        self.constraint_matrix.nrows()
    }

    /// The Hessian `H`.
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    /// The linear term `f`.
    pub fn linear(&self) -> &DVector<f64> {
        &self.linear
    }

    /// The constraint matrix `G`.
    pub fn constraint_matrix(&self) -> &DMatrix<f64> {
        &self.constraint_matrix
    }

    /// The constraint right-hand side `h`.
    pub fn constraint_rhs(&self) -> &DVector<f64> {
        &self.constraint_rhs
    }

    /// Replaces the linear term, keeping everything else (the common case
    /// in receding-horizon loops where only `f` changes step to step).
    pub fn with_linear(&self, linear: DVector<f64>) -> Result<Self, QpError> {
        if linear.len() != self.dim() {
            return Err(QpError::DimensionMismatch(format!(
                "linear term has length {}, expected {}",
                linear.len(),
                self.dim()
            )));
        }
        Ok(QuadraticProgram {
            hessian: self.hessian.clone(),
            linear,
            constraint_matrix: self.constraint_matrix.clone(),
            constraint_rhs: self.constraint_rhs.clone(),
        })
    }

    /// Objective value `1/2 xᵀ H x + fᵀ x`.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.hessian * x).dot(x) + self.linear.dot(x)
    }

    /// Solves with default settings.
    pub fn solve(&self, warm: Option<&WarmStart>) -> Result<QpSolution, QpError> {
        solve_qp(self, warm, &SolveSettings::default())
    }

    /// Serializes the problem as a JSON diagnostic dump with keys
    /// `H`, `f`, `G`, `h` (matrices as nested row-major arrays).
    pub fn to_diagnostic_json(&self) -> String {
        let mat = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| m.row(i).iter().cloned().collect())
                .collect()
        };
        let doc = serde_json::json!({
            "H": mat(&self.hessian),
            "f": self.linear.as_slice().to_vec(),
            "G": mat(&self.constraint_matrix),
            "h": self.constraint_rhs.as_slice().to_vec(),
        });
        serde_json::to_string_pretty(&doc).expect("JSON serialization cannot fail")
    }
}

/// Warm-start information: a previous iterate and the constraint rows it
/// held active, used as the initial working-set guess.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub working_set: Vec<usize>,
}

/// Solution of an inequality-constrained quadratic program.
#[derive(Debug, Clone)]
pub struct QpSolution {
    /// The minimizer.
    pub x: DVector<f64>,
    /// Multipliers for all constraint rows (zero on inactive rows),
    /// satisfying `H x + f + Gᵀ μ = 0` with `μ ≥ -1e-10`.
    pub multipliers: DVector<f64>,
    /// Ascending indices of rows satisfied with equality at the solution
    /// (slack at most `1e-7`).
    pub active_set: Vec<usize>,
    /// Ascending indices of the rows the solver held as equalities at
    /// termination; these determine the multipliers and are always
    /// linearly independent.
    pub working_set: Vec<usize>,
    /// Objective value at the minimizer.
    pub objective: f64,
    /// Active-set iterations used.
    pub iterations: usize,
    /// Stationarity residual `‖H x + f + Gᵀ μ‖₂`.
    pub kkt_residual: f64,
}

/// Solves the equality-constrained problem
/// `minimize 1/2 xᵀ H x + fᵀ x subject to A x = b`
/// and returns the unique stationary point and its multipliers `ν`
/// (convention `H x + f + Aᵀ ν = 0`).
///
/// Fails when `A` is row-rank deficient or when the solved system's KKT
/// residual exceeds `1e-9 · (1 + ‖b‖ + ‖f‖)`.
pub fn solve_equality_kkt(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    if f.len() != h.nrows() {
        return Err(QpError::DimensionMismatch(format!(
            "linear term has length {}, Hessian dimension is {}",
            f.len(),
            h.nrows()
        )));
    }
    if a.nrows() != b.len() {
        return Err(QpError::DimensionMismatch(format!(
            "{} equality rows but right-hand side has length {}",
            a.nrows(),
            b.len()
        )));
    }
    let kkt = KktFactorization::new(h, a)?;
    let (x, nu) = kkt.solve(&(-f), b);
    let stationarity = h * &x + f + a.transpose() * &nu;
    let primal = a * &x - b;
    let residual = (stationarity.norm_squared() + primal.norm_squared()).sqrt();
    let tol = 1e-9 * (1.0 + b.norm() + f.norm());
    if residual > tol {
        return Err(QpError::Numerical(format!(
            "equality-constrained KKT solve residual {residual:.3e} exceeds {tol:.3e}"
        )));
    }
    Ok((x, nu))
}
