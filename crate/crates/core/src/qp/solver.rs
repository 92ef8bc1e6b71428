//! Primal active-set iteration with a feasible-start phase 1.
//!
//! Phase 1 finds a feasible point: the warm start, the unconstrained
//! minimizer and the origin are tried in that order, then an elastic
//! subproblem with one slack variable `t` (minimize the original
//! objective plus `M·t` subject to `G x − t·1 ≤ h`, `t ≥ 0`, which is
//! trivially feasible) is solved with escalating `M` until the slack
//! vanishes.  Phase 2 is the textbook iteration: solve the
//! equality-constrained subproblem on the working set, step to the first
//! blocking row, add it; at a stationary point drop the most negative
//! multiplier (lowest index on exact ties) or stop when all multipliers
//! are nonnegative.

use super::kkt::{HessianFactor, KktFactorization};
use super::{QpError, QpSolution, QuadraticProgram, WarmStart};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Tunable solver tolerances; the defaults suit well-scaled problems.
#[derive(Debug, Clone)]
pub struct SolveSettings {
    /// Iteration cap; `0` selects `50 + 10 · (rows + 1)` automatically.
    pub max_iterations: usize,
    /// Absolute slack threshold below which a row is reported active.
    pub activity_tol: f64,
    /// Feasibility tolerance, relative to `1 + ‖h‖∞`.
    pub feasibility_rtol: f64,
}

impl Default for SolveSettings {
    fn default() -> Self {
        SolveSettings {
            max_iterations: 0,
            activity_tol: 1e-7,
            feasibility_rtol: 1e-9,
        }
    }
}

/// Multipliers above this (negative) threshold count as nonnegative.
const MULTIPLIER_TOL: f64 = -1e-10;

/// Relative step-length threshold declaring a stationary iterate.
const STEP_TOL: f64 = 1e-11;

fn select_rows(g: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(idx.len(), g.ncols());
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).copy_from(&g.row(i));
    }
    out
}

struct Core<'a> {
    h: &'a DMatrix<f64>,
    f: &'a DVector<f64>,
    g: &'a DMatrix<f64>,
    rhs: &'a DVector<f64>,
    hessian: Arc<HessianFactor>,
    row_norms: Vec<f64>,
    feas_tol: f64,
    max_iter: usize,
    /// Debug-assert monotone descent.  Off for the elastic feasibility
    /// subproblem: its objective is dominated by the escalating penalty
    /// weight, so snapping back onto working rows the iterate drifted off
    /// between factorizations costs an uphill wobble proportional to that
    /// weight, which no fixed relative tolerance separates from a genuine
    /// direction bug.  The subproblem is judged by its final slack instead.
    check_descent: bool,
}

struct RawSolution {
    x: DVector<f64>,
    working: Vec<usize>,
    nu: DVector<f64>,
    iterations: usize,
}

impl Core<'_> {
    fn max_violation(&self, x: &DVector<f64>) -> f64 {
        if self.g.nrows() == 0 {
            return 0.0;
        }
        let gx = self.g * x;
        let mut worst = 0.0f64;
        for i in 0..self.g.nrows() {
            worst = worst.max(gx[i] - self.rhs[i]);
        }
        worst
    }

    fn factor(&self, working: &[usize]) -> Result<KktFactorization, QpError> {
        KktFactorization::from_hessian(self.hessian.clone(), &select_rows(self.g, working))
    }

    fn working_rhs(&self, working: &[usize]) -> DVector<f64> {
        DVector::from_iterator(working.len(), working.iter().map(|&i| self.rhs[i]))
    }

    #[cfg(debug_assertions)]
    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (self.h * x).dot(x) + self.f.dot(x)
    }

    fn stationarity_residual(&self, x: &DVector<f64>, mu: &DVector<f64>) -> f64 {
        (self.h * x + self.f + self.g.transpose() * mu).norm()
    }

    /// Swaps out a working row that makes the candidate row dependent:
    /// with `aᵢ = A_Wᵀ λ`, drops the row minimizing `ν_j / λ_j` over
    /// `λ_j > 0` so the candidate can enter.
    fn resolve_dependence(
        &self,
        working: &mut Vec<usize>,
        kkt: &KktFactorization,
        candidate: usize,
    ) -> Result<(), QpError> {
        let a_i = self.g.row(candidate).transpose();
        let proj = kkt.rows() * self.hessian.solve_vec(&a_i);
        let lambda = kkt
            .solve_schur(&proj)
            .ok_or_else(|| QpError::Numerical("dependence resolution with empty working set".into()))?;
        let b_w = self.working_rhs(working);
        let (_, nu) = kkt.solve(&(-self.f), &b_w);
        let lambda_scale = lambda.amax().max(1.0);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..lambda.len() {
            if lambda[j] > 1e-10 * lambda_scale {
                let ratio = nu[j] / lambda[j];
                match best {
                    Some((_, r)) if ratio >= r => {}
                    _ => best = Some((j, ratio)),
                }
            }
        }
        let (j, _) = best.ok_or_else(|| {
            QpError::Numerical(format!(
                "constraint row {candidate} is dependent on the working set with no exchangeable row"
            ))
        })?;
        working.remove(j);
        Ok(())
    }

    fn add_row(
        &self,
        working: &mut Vec<usize>,
        kkt: &mut KktFactorization,
        candidate: usize,
    ) -> Result<(), QpError> {
        for _ in 0..=working.len() {
            let mut trial = working.clone();
            let pos = trial.partition_point(|&j| j < candidate);
            trial.insert(pos, candidate);
            match self.factor(&trial) {
                Ok(f) => {
                    *working = trial;
                    *kkt = f;
                    return Ok(());
                }
                Err(QpError::RankDeficientConstraints { .. }) => {
                    self.resolve_dependence(working, kkt, candidate)?;
                    *kkt = self.factor(working)?;
                }
                Err(e) => return Err(e),
            }
        }
        Err(QpError::Numerical(
            "could not restore working-set independence".into(),
        ))
    }

    fn run(&self, x0: DVector<f64>, w0: Vec<usize>) -> Result<RawSolution, QpError> {
        let mut working = w0;
        working.sort_unstable();
        working.dedup();
        let mut kkt = match self.factor(&working) {
            Ok(f) => f,
            // A dependent warm-start guess is best-effort only.
            Err(QpError::RankDeficientConstraints { .. }) if !working.is_empty() => {
                working.clear();
                self.factor(&working)?
            }
            Err(e) => return Err(e),
        };
        let mut x = x0;
        let neg_f = -self.f;
        let mut iterations = 0usize;
        #[cfg(debug_assertions)]
        let mut obj_prev = f64::INFINITY;

        loop {
            iterations += 1;
            let b_w = self.working_rhs(&working);
            let (z, nu) = kkt.solve(&neg_f, &b_w);
            if iterations > self.max_iter {
                let mut mu = DVector::zeros(self.g.nrows());
                for (j, &i) in working.iter().enumerate() {
                    mu[i] = nu[j];
                }
                let residual = self.stationarity_residual(&x, &mu);
                return Err(QpError::MaxIterations {
                    iterations: iterations - 1,
                    last_iterate: Box::new(x),
                    kkt_residual: residual,
                });
            }
            let d = &z - &x;
            if d.norm() <= STEP_TOL * (1.0 + z.norm()) {
                if working.is_empty() {
                    return Ok(RawSolution {
                        x: z,
                        working,
                        nu: DVector::zeros(0),
                        iterations,
                    });
                }
                let mut j_min = 0usize;
                let mut nu_min = nu[0];
                for j in 1..nu.len() {
                    if nu[j] < nu_min {
                        nu_min = nu[j];
                        j_min = j;
                    }
                }
                if nu_min >= MULTIPLIER_TOL {
                    return Ok(RawSolution {
                        x: z,
                        working,
                        nu,
                        iterations,
                    });
                }
                working.remove(j_min);
                kkt = self.factor(&working)?;
                continue;
            }

            // Ratio test: step toward z until the first inactive row blocks.
            let gd = self.g * &d;
            let gx = self.g * &x;
            let dn = d.norm();
            let mut alpha = 1.0f64;
            let mut blocker: Option<usize> = None;
            for i in 0..self.g.nrows() {
                if working.binary_search(&i).is_ok() {
                    continue;
                }
                let denom = gd[i];
                if denom > 1e-13 * (1.0 + self.row_norms[i] * dn) {
                    let slack = self.rhs[i] - gx[i];
                    let a_i = (slack / denom).max(0.0);
                    if a_i < alpha {
                        alpha = a_i;
                        blocker = Some(i);
                    }
                }
            }
            x += alpha * &d;
            #[cfg(debug_assertions)]
            if self.check_descent {
                let obj = self.objective(&x);
                debug_assert!(
                    obj <= obj_prev + 1e-7 * (1.0 + obj_prev.abs()),
                    "objective increased from {obj_prev} to {obj}"
                );
                obj_prev = obj;
            }
            if let Some(i) = blocker {
                self.add_row(&mut working, &mut kkt, i)?;
            }
        }
    }

}

/// Solves a validated quadratic program.
///
/// `warm` supplies a previous iterate and active-set guess: if the point
/// is feasible it seeds phase 2 directly.  The returned multipliers and
/// iterate satisfy stationarity to `1e-8 · (1 + ‖f‖)` and feasibility to
/// `1e-8 · (1 + ‖h‖∞)`; violations of either raise an error instead of
/// returning a bad solution.
pub fn solve_qp(
    qp: &QuadraticProgram,
    warm: Option<&WarmStart>,
    settings: &SolveSettings,
) -> Result<QpSolution, QpError> {
    let n = qp.dim();
    let n_c = qp.num_constraints();
    let hessian = Arc::new(HessianFactor::new(qp.hessian())?);
    let row_norms: Vec<f64> = (0..n_c).map(|i| qp.constraint_matrix().row(i).norm()).collect();
    let h_scale = 1.0
        + if n_c > 0 {
            qp.constraint_rhs().amax()
        } else {
            0.0
        };
    let feas_tol = settings.feasibility_rtol * h_scale;
    let max_iter = if settings.max_iterations == 0 {
        50 + 10 * (n_c + 1)
    } else {
        settings.max_iterations
    };
    let core = Core {
        h: qp.hessian(),
        f: qp.linear(),
        g: qp.constraint_matrix(),
        rhs: qp.constraint_rhs(),
        hessian,
        row_norms,
        feas_tol,
        max_iter,
        check_descent: true,
    };

    let (x0, w0) = initial_point(qp, &core, warm, settings)?;
    let raw = core.run(x0, w0)?;

    let mut multipliers = DVector::zeros(n_c);
    for (j, &i) in raw.working.iter().enumerate() {
        multipliers[i] = raw.nu[j];
    }
    let mut active_set = Vec::new();
    if n_c > 0 {
        let gx = qp.constraint_matrix() * &raw.x;
        for i in 0..n_c {
            if qp.constraint_rhs()[i] - gx[i] <= settings.activity_tol {
                active_set.push(i);
            }
        }
    }
    let kkt_residual = (qp.hessian() * &raw.x
        + qp.linear()
        + qp.constraint_matrix().transpose() * &multipliers)
        .norm();
    let stat_tol = 1e-8 * (1.0 + qp.linear().norm());
    if kkt_residual > stat_tol {
        return Err(QpError::Numerical(format!(
            "stationarity residual {kkt_residual:.3e} exceeds {stat_tol:.3e}"
        )));
    }
    let violation = core.max_violation(&raw.x);
    if violation > 1e-8 * h_scale {
        return Err(QpError::Numerical(format!(
            "solution violates constraints by {violation:.3e}"
        )));
    }
    debug_assert!(n == raw.x.len());
    Ok(QpSolution {
        objective: qp.objective(&raw.x),
        x: raw.x,
        multipliers,
        active_set,
        working_set: raw.working,
        iterations: raw.iterations,
        kkt_residual,
    })
}

fn initial_point(
    qp: &QuadraticProgram,
    core: &Core<'_>,
    warm: Option<&WarmStart>,
    settings: &SolveSettings,
) -> Result<(DVector<f64>, Vec<usize>), QpError> {
    let n = qp.dim();
    let n_c = qp.num_constraints();
    if let Some(w) = warm {
        if w.x.len() == n && core.max_violation(&w.x) <= core.feas_tol.max(1e-12) {
            let gx = if n_c > 0 {
                qp.constraint_matrix() * &w.x
            } else {
                DVector::zeros(0)
            };
            let mut ws: Vec<usize> = w
                .working_set
                .iter()
                .copied()
                .filter(|&i| i < n_c && qp.constraint_rhs()[i] - gx[i] <= settings.activity_tol)
                .collect();
            ws.sort_unstable();
            ws.dedup();
            return Ok((w.x.clone(), ws));
        }
    }
    let x_unc = core.hessian.solve_vec(&(-qp.linear()));
    if core.max_violation(&x_unc) <= core.feas_tol {
        return Ok((x_unc, Vec::new()));
    }
    let origin = DVector::zeros(n);
    if core.max_violation(&origin) <= core.feas_tol {
        return Ok((origin, Vec::new()));
    }
    let x_base = warm.map(|w| w.x.clone()).filter(|x| x.len() == n).unwrap_or(origin);
    let x0 = phase_one(qp, core, &x_base)?;
    Ok((x0, Vec::new()))
}

/// Elastic feasibility subproblem with escalating penalty weight.
fn phase_one(
    qp: &QuadraticProgram,
    core: &Core<'_>,
    x_base: &DVector<f64>,
) -> Result<DVector<f64>, QpError> {
    let n = qp.dim();
    let n_c = qp.num_constraints();
    let kappa = (qp.hessian().diagonal().sum() / n as f64).max(1.0);
    let mut h_aug = DMatrix::zeros(n + 1, n + 1);
    h_aug.view_mut((0, 0), (n, n)).copy_from(qp.hessian());
    h_aug[(n, n)] = kappa;
    let mut g_aug = DMatrix::zeros(n_c + 1, n + 1);
    g_aug
        .view_mut((0, 0), (n_c, n))
        .copy_from(qp.constraint_matrix());
    for i in 0..=n_c {
        g_aug[(i, n)] = -1.0;
    }
    let mut rhs_aug = DVector::zeros(n_c + 1);
    rhs_aug.rows_mut(0, n_c).copy_from(qp.constraint_rhs());

    let f_scale = 1.0 + qp.linear().amax() + qp.hessian().diagonal().amax();
    let mut m_weight = 1e3 * f_scale;
    let viol0 = core.max_violation(x_base);
    let mut last_slack = viol0;
    for _attempt in 0..4 {
        let mut f_aug = DVector::zeros(n + 1);
        f_aug.rows_mut(0, n).copy_from(qp.linear());
        f_aug[n] = m_weight;
        let hessian_aug = Arc::new(HessianFactor::new(&h_aug)?);
        let row_norms: Vec<f64> = (0..=n_c).map(|i| g_aug.row(i).norm()).collect();
        let sub = Core {
            h: &h_aug,
            f: &f_aug,
            g: &g_aug,
            rhs: &rhs_aug,
            hessian: hessian_aug,
            row_norms,
            feas_tol: core.feas_tol,
            max_iter: core.max_iter,
            check_descent: false,
        };
        let mut x0 = DVector::zeros(n + 1);
        x0.rows_mut(0, n).copy_from(x_base);
        x0[n] = viol0 + 1.0;
        let raw = sub.run(x0, Vec::new())?;
        last_slack = raw.x[n];
        if last_slack <= core.feas_tol {
            return Ok(raw.x.rows(0, n).into_owned());
        }
        m_weight *= 1e3;
    }
    Err(QpError::Infeasible {
        max_violation: last_slack.max(0.0),
    })
}
