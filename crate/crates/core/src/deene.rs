//! Fast receding-horizon updates for the data-driven tracking controller.
//!
//! Re-solving the tracking quadratic program at every control step repeats a
//! large amount of work: the Hessian and the constraint rows never change
//! between steps — only the measured window and the reference slice move.
//! This module exploits that structure.  Around a solved *nominal point* it
//! factorizes the saddle-point system of the optimality conditions once and
//! turns each subsequent step into a pair of small matrix-vector products:
//!
//! * [`recover_multipliers`] reconstructs the active-constraint multipliers
//!   from the cost gradient alone,
//! * [`build_correction`] precomputes the sensitivity gains of the optimizer
//!   with respect to the window and the reference,
//! * [`correct_optimal`] / [`correct_nonoptimal`] map a window/reference
//!   change to the exact new optimizer while the active set is unchanged,
//! * [`run_controller`] drives a [`Plant`] in closed loop in either mode —
//!   re-solving every cycle (`deepc`) or correcting a factorized nominal
//!   (`deene`) — and records a [`ClosedLoopTrace`].
//!
//! For a quadratic cost with affine constraints the corrected point is not an
//! approximation: as long as the active set does not change, it matches a
//! fresh solve to rounding error.  A cheap safeguard (primal feasibility plus
//! multiplier signs) detects active-set changes and falls back to a full
//! re-solve, so the controller never silently applies a stale plan.

use std::error::Error;
use std::fmt;
use std::io::{self, BufRead, Write as IoWrite};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deepc::{DeepcConfig, DeepcError, DeepcProblem, DeepcSolution, InitialWindow};
use crate::plants::{Plant, ReferenceTrack};
use crate::qp::{HessianFactor, KktFactorization, QpError, WarmStart};
use crate::signal::HankelPartition;

/// Relative singular-value cutoff below which active rows are treated as
/// linearly dependent.
const RANK_RTOL: f64 = 1e-10;

/// Errors from multiplier recovery, gain construction, or the closed loop.
#[derive(Debug)]
pub enum DeeneError {
    /// Input dimensions do not line up; the message names the offender.
    Dimension(String),
    /// The active constraint rows are linearly dependent, so the multipliers
    /// are not unique.  Resolving that would take a constraint
    /// back-propagation pass (eliminating redundant rows against the data
    /// matrices), which this crate does not implement; drop the redundant
    /// rows or perturb the constraint geometry instead.
    DependentActiveRows {
        /// Numerical rank estimate of the active-row block.
        estimated_rank: usize,
        /// Number of active rows supplied.
        rows: usize,
    },
    /// Correction gains were built for a different active set than the
    /// nominal point carries; rebuild the gains before correcting.
    StaleGains {
        /// Active set the gains were built for.
        expected: Vec<usize>,
        /// Active set of the nominal point.
        got: Vec<usize>,
    },
    /// [`correct_optimal`] needs a nominal point that is marked optimal.
    NotOptimal(String),
    /// Failure inside the quadratic-program layer.
    Solver(QpError),
    /// Failure assembling or solving the tracking problem.
    Tracking(DeepcError),
}

impl fmt::Display for DeeneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeeneError::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            DeeneError::DependentActiveRows {
                estimated_rank,
                rows,
            } => write!(
                f,
                "the {rows} active constraint rows are linearly dependent (estimated rank \
                 {estimated_rank}); unique multiplier recovery would need a constraint \
                 back-propagation pass, which is not implemented — drop redundant rows or \
                 perturb the constraint geometry"
            ),
            DeeneError::StaleGains { expected, got } => write!(
                f,
                "correction gains are stale: built for active set {expected:?} but the \
                 nominal point has {got:?}; rebuild the gains"
            ),
            DeeneError::NotOptimal(msg) => {
                write!(f, "nominal point is not marked optimal: {msg}")
            }
            DeeneError::Solver(e) => write!(f, "quadratic-program failure: {e}"),
            DeeneError::Tracking(e) => write!(f, "tracking-problem failure: {e}"),
        }
    }
}

impl Error for DeeneError {}

impl From<QpError> for DeeneError {
    fn from(e: QpError) -> Self {
        DeeneError::Solver(e)
    }
}

impl From<DeepcError> for DeeneError {
    fn from(e: DeepcError) -> Self {
        DeeneError::Tracking(e)
    }
}

/// Reconstructs the multipliers of the active rows from the cost gradient.
///
/// At an optimizer the cost gradient lies in the row space of the active
/// constraints: `∇J = −Cᵀμ`.  Solving the normal equations of that relation
/// gives `μ = −(C Cᵀ)⁻¹ C ∇J`, which recovers the multipliers without ever
/// touching the solver — useful after a corrected step, where the optimizer
/// moved but no quadratic program was solved.
///
/// An empty active set recovers an empty multiplier vector.  Linearly
/// dependent rows (smallest singular value below `1e-10` of the largest) are
/// rejected, since the multipliers are then not unique.
pub fn recover_multipliers(
    cost_gradient: &DVector<f64>,
    active_rows: &DMatrix<f64>,
) -> Result<DVector<f64>, DeeneError> {
    if active_rows.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    if active_rows.ncols() != cost_gradient.len() {
        return Err(DeeneError::Dimension(format!(
            "active rows have {} columns but the gradient has {} entries",
            active_rows.ncols(),
            cost_gradient.len()
        )));
    }
    let (rank, _) = crate::signal::svd_rank(active_rows, RANK_RTOL);
    if rank < active_rows.nrows() {
        return Err(DeeneError::DependentActiveRows {
            estimated_rank: rank,
            rows: active_rows.nrows(),
        });
    }
    let mut normal = active_rows * active_rows.transpose();
    let symmetrized = 0.5 * (&normal + normal.transpose());
    normal = symmetrized;
    let chol = nalgebra::Cholesky::new(normal).ok_or(DeeneError::DependentActiveRows {
        estimated_rank: rank,
        rows: active_rows.nrows(),
    })?;
    Ok(-chol.solve(&(active_rows * cost_gradient)))
}

/// A solved (or corrected) operating point the gains are applied around.
#[derive(Debug, Clone)]
pub struct NominalPoint {
    /// Optimizer of the tracking program at the nominal window/reference.
    pub g: DVector<f64>,
    /// Stacked window `[u_ini; y_ini]` (oldest sample first) at the nominal.
    pub window: DVector<f64>,
    /// Stacked reference slice at the nominal.
    pub reference: DVector<f64>,
    /// Multipliers of the active rows, in `active_set` order.
    pub multipliers: DVector<f64>,
    /// Sorted indices of the constraint rows held active.
    pub active_set: Vec<usize>,
    /// True when `g` satisfies the optimality conditions at the nominal
    /// window/reference (fresh solves and safeguarded corrections do).
    pub is_optimal: bool,
}

impl NominalPoint {
    /// Wraps a fresh tracking solve as a nominal point.
    ///
    /// The active set is the solver's working set (sorted), whose rows are
    /// guaranteed linearly independent; the multipliers are restricted to it
    /// in the same order.
    pub fn from_solution(
        solution: &DeepcSolution,
        window: DVector<f64>,
        reference: DVector<f64>,
    ) -> Self {
        let mut set = solution.working_set.clone();
        set.sort_unstable();
        let multipliers =
            DVector::from_iterator(set.len(), set.iter().map(|&i| solution.multipliers[i]));
        NominalPoint {
            g: solution.g.clone(),
            window,
            reference,
            multipliers,
            active_set: set,
            is_optimal: true,
        }
    }
}

/// Exact change of the optimizer (and its multipliers) for one perturbation.
#[derive(Debug, Clone)]
pub struct CorrectionStep {
    /// Change of the optimizer.
    pub delta_g: DVector<f64>,
    /// Change of the active-row multipliers, in active-set order.
    pub delta_multipliers: DVector<f64>,
}

/// Precomputed sensitivity gains of the optimizer around one active set.
///
/// The gains depend only on the Hessian and the active rows — not on the
/// nominal point — so they survive nominal updates unchanged and only need
/// rebuilding when the active set itself changes.  The saddle-point
/// factorization is kept, so the residual term of [`correct_nonoptimal`]
/// costs one back-substitution instead of a fresh factorization.
pub struct CorrectionGains {
    kkt: KktFactorization,
    active_set: Vec<usize>,
    window_gain: DMatrix<f64>,
    reference_gain: DMatrix<f64>,
    window_multiplier_gain: DMatrix<f64>,
    reference_multiplier_gain: DMatrix<f64>,
}

impl fmt::Debug for CorrectionGains {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CorrectionGains")
            .field("active_set", &self.active_set)
            .field("dim", &self.window_gain.nrows())
            .field("window_cols", &self.window_gain.ncols())
            .field("reference_cols", &self.reference_gain.ncols())
            .finish_non_exhaustive()
    }
}

impl CorrectionGains {
    /// Sorted active set the gains were built for.
    pub fn active_set(&self) -> &[usize] {
        &self.active_set
    }

    /// Optimizer change per unit window change.
    pub fn window_gain(&self) -> &DMatrix<f64> {
        &self.window_gain
    }

    /// Optimizer change per unit reference change.
    pub fn reference_gain(&self) -> &DMatrix<f64> {
        &self.reference_gain
    }

    /// Multiplier change per unit window change.
    pub fn window_multiplier_gain(&self) -> &DMatrix<f64> {
        &self.window_multiplier_gain
    }

    /// Multiplier change per unit reference change.
    pub fn reference_multiplier_gain(&self) -> &DMatrix<f64> {
        &self.reference_multiplier_gain
    }

    /// The saddle-point factorization the gains were extracted from.
    pub fn factorization(&self) -> &KktFactorization {
        &self.kkt
    }

    /// Applies the residual map: the optimizer/multiplier move that cancels
    /// a stationarity residual at the nominal point (one back-substitution,
    /// the factorization is reused).  Returns the pair
    /// `(δg, μ_implied)` solving the saddle system against
    /// `[-residual; 0]`.
    pub fn residual_step(&self, residual: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let zeros = DVector::zeros(self.active_set.len());
        self.kkt.solve(&(-residual), &zeros)
    }

    /// Builds gains for `problem` around the given active set.
    pub fn for_problem(
        problem: &DeepcProblem,
        hessian: &Arc<HessianFactor>,
        active_set: &[usize],
    ) -> Result<Self, DeeneError> {
        let rows = select_rows(&problem.constraints().matrix, active_set);
        build_correction(
            hessian.clone(),
            active_set.to_vec(),
            &rows,
            problem.gradient_window_map(),
            problem.gradient_reference_map(),
        )
    }

    fn check_fingerprint(&self, active_set: &[usize]) -> Result<(), DeeneError> {
        if self.active_set != active_set {
            return Err(DeeneError::StaleGains {
                expected: self.active_set.clone(),
                got: active_set.to_vec(),
            });
        }
        Ok(())
    }
}

/// Extracts the listed rows of `matrix` into a new matrix, in list order.
fn select_rows(matrix: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), matrix.ncols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from(&matrix.row(r));
    }
    out
}

/// Factorizes the saddle-point system for one active set and extracts the
/// window/reference sensitivity gains of the optimizer and its multipliers.
///
/// With an empty active set the gains reduce to the unconstrained maps
/// `−H⁻¹·(window map)` and `−H⁻¹·(reference map)`.  Linearly dependent
/// active rows are rejected.
pub fn build_correction(
    hessian: Arc<HessianFactor>,
    active_set: Vec<usize>,
    active_rows: &DMatrix<f64>,
    grad_window_map: &DMatrix<f64>,
    grad_reference_map: &DMatrix<f64>,
) -> Result<CorrectionGains, DeeneError> {
    let dim = hessian.dim();
    if active_rows.nrows() != active_set.len() {
        return Err(DeeneError::Dimension(format!(
            "{} active rows supplied for {} active indices",
            active_rows.nrows(),
            active_set.len()
        )));
    }
    if active_rows.ncols() != dim {
        return Err(DeeneError::Dimension(format!(
            "active rows have {} columns but the Hessian has dimension {dim}",
            active_rows.ncols()
        )));
    }
    if grad_window_map.nrows() != dim || grad_reference_map.nrows() != dim {
        return Err(DeeneError::Dimension(format!(
            "gradient maps must have {dim} rows (got {} and {})",
            grad_window_map.nrows(),
            grad_reference_map.nrows()
        )));
    }
    let kkt = KktFactorization::from_hessian(hessian, active_rows).map_err(|e| match e {
        QpError::RankDeficientConstraints {
            estimated_rank,
            rows,
        } => DeeneError::DependentActiveRows {
            estimated_rank,
            rows,
        },
        other => DeeneError::Solver(other),
    })?;
    let n_active = active_rows.nrows();
    let zeros_w = DMatrix::zeros(n_active, grad_window_map.ncols());
    let zeros_r = DMatrix::zeros(n_active, grad_reference_map.ncols());
    let (window_gain, window_multiplier_gain) =
        kkt.solve_columns(&(-grad_window_map.clone()), &zeros_w);
    let (reference_gain, reference_multiplier_gain) =
        kkt.solve_columns(&(-grad_reference_map.clone()), &zeros_r);
    Ok(CorrectionGains {
        kkt,
        active_set,
        window_gain,
        reference_gain,
        window_multiplier_gain,
        reference_multiplier_gain,
    })
}

fn check_deltas(
    gains: &CorrectionGains,
    delta_window: &DVector<f64>,
    delta_reference: &DVector<f64>,
) -> Result<(), DeeneError> {
    if delta_window.len() != gains.window_gain.ncols() {
        return Err(DeeneError::Dimension(format!(
            "window delta has {} entries, gains expect {}",
            delta_window.len(),
            gains.window_gain.ncols()
        )));
    }
    if delta_reference.len() != gains.reference_gain.ncols() {
        return Err(DeeneError::Dimension(format!(
            "reference delta has {} entries, gains expect {}",
            delta_reference.len(),
            gains.reference_gain.ncols()
        )));
    }
    Ok(())
}

/// Exact optimizer change for a window/reference perturbation around an
/// *optimal* nominal point with an unchanged active set.
///
/// Two matrix-vector products; no factorization, no solve.  The result is
/// exact (to rounding) for the quadratic tracking cost with affine rows as
/// long as the perturbed problem keeps the same active set — which the
/// caller is expected to verify afterwards, e.g. by a feasibility scan and a
/// multiplier sign check.
pub fn correct_optimal(
    gains: &CorrectionGains,
    nominal: &NominalPoint,
    delta_window: &DVector<f64>,
    delta_reference: &DVector<f64>,
) -> Result<CorrectionStep, DeeneError> {
    gains.check_fingerprint(&nominal.active_set)?;
    if !nominal.is_optimal {
        return Err(DeeneError::NotOptimal(
            "correct_optimal needs an optimal nominal; use correct_nonoptimal and supply the \
             cost gradient instead"
                .into(),
        ));
    }
    check_deltas(gains, delta_window, delta_reference)?;
    let delta_g =
        &gains.window_gain * delta_window + &gains.reference_gain * delta_reference;
    let delta_multipliers = &gains.window_multiplier_gain * delta_window
        + &gains.reference_multiplier_gain * delta_reference;
    Ok(CorrectionStep {
        delta_g,
        delta_multipliers,
    })
}

/// Like [`correct_optimal`], but valid from a nominal point that is only
/// feasible, not optimal: the supplied cost gradient (at the nominal point
/// and nominal window/reference) contributes one extra back-substitution
/// that cancels the stationarity residual.
///
/// At an optimal nominal the residual term vanishes and the result coincides
/// with [`correct_optimal`]; with no active rows and zero deltas the step is
/// exactly the Newton step to the unconstrained optimum.
pub fn correct_nonoptimal(
    gains: &CorrectionGains,
    nominal: &NominalPoint,
    delta_window: &DVector<f64>,
    delta_reference: &DVector<f64>,
    cost_gradient: &DVector<f64>,
) -> Result<CorrectionStep, DeeneError> {
    gains.check_fingerprint(&nominal.active_set)?;
    check_deltas(gains, delta_window, delta_reference)?;
    if cost_gradient.len() != nominal.g.len() {
        return Err(DeeneError::Dimension(format!(
            "cost gradient has {} entries, the optimizer has {}",
            cost_gradient.len(),
            nominal.g.len()
        )));
    }
    let (residual_g, implied_multipliers) = gains.residual_step(cost_gradient);
    let delta_g = &gains.window_gain * delta_window
        + &gains.reference_gain * delta_reference
        + residual_g;
    // The residual solve returns the full multipliers implied at the nominal
    // window/reference, so the increment subtracts the nominal multipliers.
    let delta_multipliers = &gains.window_multiplier_gain * delta_window
        + &gains.reference_multiplier_gain * delta_reference
        + implied_multipliers
        - &nominal.multipliers;
    Ok(CorrectionStep {
        delta_g,
        delta_multipliers,
    })
}

/// Which controller drives the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerMode {
    /// Re-solve the tracking program from scratch at every cycle.
    Deepc,
    /// Solve once, then propagate the optimizer with correction gains,
    /// falling back to a re-solve only when the safeguard trips.
    Deene,
}

impl ControllerMode {
    /// Stable lowercase label used in CSV exports and reports.
    pub fn label(&self) -> &'static str {
        match self {
            ControllerMode::Deepc => "deepc",
            ControllerMode::Deene => "deene",
        }
    }

    /// Parses the label written by [`ControllerMode::label`].
    pub fn parse(label: &str) -> Option<Self> {
        match label {
            "deepc" => Some(ControllerMode::Deepc),
            "deene" => Some(ControllerMode::Deene),
            _ => None,
        }
    }
}

impl fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Closed-loop run settings.
#[derive(Debug, Clone)]
pub struct ControllerOptions {
    /// Controller flavour.
    pub mode: ControllerMode,
    /// Open-loop length `s`: a fresh plan is computed every `min(s+1, N)`
    /// steps.  `s = 0` recomputes every step.
    pub open_loop_len: usize,
    /// Number of closed-loop steps to run (after the bootstrap window).
    pub total_steps: usize,
    /// Seed of the bootstrap-input generator.
    pub bootstrap_seed: u64,
    /// Bootstrap input amplitude as a fraction of each channel's bound
    /// half-width (absolute amplitude on unbounded channels).  Zero holds
    /// each channel at its bound midpoint.
    pub bootstrap_scale: f64,
    /// Relative tolerance of the correction safeguard (feasibility and
    /// multiplier signs).
    pub safeguard_tol: f64,
    /// Maximum window+reference perturbation norm a correction is trusted
    /// for; larger moves re-solve.  Unlimited by default.
    pub trust_radius: f64,
    /// Record wall-clock compute times (disable for runs that must not
    /// observe timing, e.g. parallel benchmark rows).
    pub record_timing: bool,
    /// Snapshot the stacked window after every step (bookkeeping tests).
    pub record_windows: bool,
}

impl ControllerOptions {
    /// Defaults: seed 0, bootstrap at half the bound width, safeguard
    /// `1e-6`, unlimited trust radius, timing on, snapshots off.
    pub fn new(mode: ControllerMode, open_loop_len: usize, total_steps: usize) -> Self {
        ControllerOptions {
            mode,
            open_loop_len,
            total_steps,
            bootstrap_seed: 0,
            bootstrap_scale: 0.5,
            safeguard_tol: 1e-6,
            trust_radius: f64::INFINITY,
            record_timing: true,
            record_windows: false,
        }
    }
}

/// One closed-loop step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Step index, starting at 0 at the first controlled step.
    pub step: usize,
    /// Applied input.
    pub input: DVector<f64>,
    /// Measured output.
    pub output: DVector<f64>,
    /// Reference point for this step.
    pub reference: DVector<f64>,
    /// Controller compute time attributed to this step, when timing is on
    /// and the controller did work here (plan steps; `None` while replaying
    /// a stored open-loop plan).
    pub compute_seconds: Option<f64>,
    /// True when the safeguard fell back to a full re-solve at this step.
    pub fallback: bool,
}

/// Record of one closed-loop run.
#[derive(Debug, Clone)]
pub struct ClosedLoopTrace {
    /// Controller that produced the trace.
    pub mode: ControllerMode,
    /// Open-loop length the run used.
    pub open_loop_len: usize,
    /// Bootstrap `(input, output)` pairs applied before the loop started.
    pub bootstrap: Vec<(DVector<f64>, DVector<f64>)>,
    /// Controlled steps, in order.
    pub rows: Vec<TraceRow>,
    /// Compute seconds of each plan-refresh cycle, the first (warm-up)
    /// cycle excluded; empty when timing is off.
    pub loop_seconds: Vec<f64>,
    /// Number of safeguard fallbacks (full re-solves) the run needed.
    pub fallback_count: usize,
    /// `(step, stacked window after the step)` snapshots when requested.
    pub window_snapshots: Vec<(usize, DVector<f64>)>,
    /// Set when the run stopped early; the rows up to the failure are kept.
    pub aborted: Option<String>,
}

/// Serializable digest of one run, for reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSummary {
    /// Controller label (`"deepc"` or `"deene"`).
    pub mode: String,
    /// Open-loop length of the run.
    pub open_loop_len: usize,
    /// Number of controlled steps recorded.
    pub steps: usize,
    /// Tracking error over the position channels only.
    pub rmse_position: f64,
    /// Tracking error over all output channels.
    pub rmse_all_channels: f64,
    /// Mean plan-refresh compute time (warm-up excluded), when timed.
    pub mean_loop_seconds: Option<f64>,
    /// Median plan-refresh compute time (warm-up excluded), when timed.
    pub median_loop_seconds: Option<f64>,
    /// Safeguard fallback count.
    pub fallback_count: usize,
    /// Early-stop reason, if the run aborted.
    pub aborted: Option<String>,
}

impl ClosedLoopTrace {
    /// Root-mean-square tracking error over the given output channels:
    /// `sqrt(mean_k ‖y_sel(k) − r_sel(k)‖²)`.
    pub fn rmse(&self, channels: &[usize]) -> f64 {
        if self.rows.is_empty() || channels.is_empty() {
            return 0.0;
        }
        let mut acc = 0.0;
        for row in &self.rows {
            for &c in channels {
                let e = row.output[c] - row.reference[c];
                acc += e * e;
            }
        }
        (acc / self.rows.len() as f64).sqrt()
    }

    /// Root-mean-square tracking error over every output channel.
    pub fn rmse_all(&self) -> f64 {
        let p = self.rows.first().map_or(0, |r| r.output.len());
        let all: Vec<usize> = (0..p).collect();
        self.rmse(&all)
    }

    /// Mean plan-refresh compute time (warm-up excluded).
    pub fn mean_loop_seconds(&self) -> Option<f64> {
        if self.loop_seconds.is_empty() {
            return None;
        }
        Some(self.loop_seconds.iter().sum::<f64>() / self.loop_seconds.len() as f64)
    }

    /// Median plan-refresh compute time (warm-up excluded).
    pub fn median_loop_seconds(&self) -> Option<f64> {
        if self.loop_seconds.is_empty() {
            return None;
        }
        let mut sorted = self.loop_seconds.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("compute times are finite"));
        let mid = sorted.len() / 2;
        Some(if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        })
    }

    /// Builds the report digest; `position_channels` selects the channels
    /// reported as positions (e.g. the x/y pair of a pose output).
    pub fn summary(&self, position_channels: &[usize]) -> TraceSummary {
        TraceSummary {
            mode: self.mode.label().to_string(),
            open_loop_len: self.open_loop_len,
            steps: self.rows.len(),
            rmse_position: self.rmse(position_channels),
            rmse_all_channels: self.rmse_all(),
            mean_loop_seconds: self.mean_loop_seconds(),
            median_loop_seconds: self.median_loop_seconds(),
            fallback_count: self.fallback_count,
            aborted: self.aborted.clone(),
        }
    }

    /// Writes the trace as CSV with columns
    /// `t,u_1..u_m,y_1..y_p,r_1..r_p,step_compute_seconds,mode,fallback_flag`.
    /// Floats use the shortest round-trip decimal form; a missing compute
    /// time is an empty field.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = io::BufWriter::new(file);
        let m = self.rows.first().map_or(0, |r| r.input.len());
        let p = self.rows.first().map_or(0, |r| r.output.len());
        write!(out, "t")?;
        for c in 0..m {
            write!(out, ",u_{}", c + 1)?;
        }
        for c in 0..p {
            write!(out, ",y_{}", c + 1)?;
        }
        for c in 0..p {
            write!(out, ",r_{}", c + 1)?;
        }
        writeln!(out, ",step_compute_seconds,mode,fallback_flag")?;
        for row in &self.rows {
            write!(out, "{}", row.step)?;
            for v in row.input.iter() {
                write!(out, ",{v}")?;
            }
            for v in row.output.iter() {
                write!(out, ",{v}")?;
            }
            for v in row.reference.iter() {
                write!(out, ",{v}")?;
            }
            match row.compute_seconds {
                Some(t) => write!(out, ",{t}")?,
                None => write!(out, ",")?,
            }
            writeln!(out, ",{},{}", self.mode.label(), u8::from(row.fallback))?;
        }
        out.flush()
    }

    /// Reads a trace back from [`ClosedLoopTrace::write_csv`] output.
    ///
    /// Only the per-step rows survive a round trip: bootstrap pairs, window
    /// snapshots, the open-loop length, and the plan-refresh timing list are
    /// not part of the CSV, so summaries that need loop timing must be taken
    /// from the live run.
    pub fn read_csv<P: AsRef<Path>>(path: P) -> io::Result<Self> {
        let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
        let file = std::fs::File::open(path)?;
        let mut lines = io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| bad("empty trace file".into()))??;
        let columns: Vec<&str> = header.split(',').collect();
        let m = columns.iter().filter(|c| c.starts_with("u_")).count();
        let p = columns.iter().filter(|c| c.starts_with("y_")).count();
        let r_count = columns.iter().filter(|c| c.starts_with("r_")).count();
        let expected = 1 + m + 2 * p + 3;
        if p == 0 || r_count != p || columns.len() != expected {
            return Err(bad(format!("unrecognized trace header: {header}")));
        }
        let mut rows = Vec::new();
        let mut mode: Option<ControllerMode> = None;
        let mut fallback_count = 0;
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected {
                return Err(bad(format!(
                    "row has {} fields, expected {expected}: {line}",
                    fields.len()
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| bad(format!("bad number {s:?}: {e}")))
            };
            let step = fields[0]
                .parse::<usize>()
                .map_err(|e| bad(format!("bad step index {:?}: {e}", fields[0])))?;
            let input = DVector::from_iterator(
                m,
                fields[1..1 + m]
                    .iter()
                    .map(|s| parse(s))
                    .collect::<Result<Vec<_>, _>>()?,
            );
            let output = DVector::from_iterator(
                p,
                fields[1 + m..1 + m + p]
                    .iter()
                    .map(|s| parse(s))
                    .collect::<Result<Vec<_>, _>>()?,
            );
            let reference = DVector::from_iterator(
                p,
                fields[1 + m + p..1 + m + 2 * p]
                    .iter()
                    .map(|s| parse(s))
                    .collect::<Result<Vec<_>, _>>()?,
            );
            let compute_seconds = if fields[expected - 3].is_empty() {
                None
            } else {
                Some(parse(fields[expected - 3])?)
            };
            let row_mode = ControllerMode::parse(fields[expected - 2])
                .ok_or_else(|| bad(format!("unknown mode label {:?}", fields[expected - 2])))?;
            match mode {
                None => mode = Some(row_mode),
                Some(seen) if seen == row_mode => {}
                Some(seen) => {
                    return Err(bad(format!(
                        "mixed mode labels in one trace: {seen} and {row_mode}"
                    )));
                }
            }
            let fallback = match fields[expected - 1] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("bad fallback flag {other:?}"))),
            };
            if fallback {
                fallback_count += 1;
            }
            rows.push(TraceRow {
                step,
                input,
                output,
                reference,
                compute_seconds,
                fallback,
            });
        }
        Ok(ClosedLoopTrace {
            mode: mode.ok_or_else(|| bad("trace has no rows".into()))?,
            open_loop_len: 0,
            bootstrap: Vec::new(),
            rows,
            loop_seconds: Vec::new(),
            fallback_count,
            window_snapshots: Vec::new(),
            aborted: None,
        })
    }
}

/// Internal state of the re-solving controller.
struct DeepcState {
    plan: DVector<f64>,
    warm: Option<WarmStart>,
}

/// Internal state of the correcting controller.
struct DeeneState {
    hessian: Arc<HessianFactor>,
    nominal: NominalPoint,
    gains: CorrectionGains,
}

/// Largest constraint-row violation at `g` (0 when there are no rows).
fn max_violation(problem: &DeepcProblem, g: &DVector<f64>) -> f64 {
    let rows = problem.constraints();
    if rows.is_empty() {
        return 0.0;
    }
    (&rows.matrix * g - &rows.rhs).max()
}

/// Cost gradient at (`g`, stacked window `w`, stacked reference `r`).
fn stacked_gradient(
    problem: &DeepcProblem,
    g: &DVector<f64>,
    w: &DVector<f64>,
    r: &DVector<f64>,
) -> DVector<f64> {
    problem.hessian() * g + problem.gradient_window_map() * w + problem.gradient_reference_map() * r
}

/// First input block of the future-input image of `g`.
fn first_input(problem: &DeepcProblem, g: &DVector<f64>) -> DVector<f64> {
    let m = problem.config().input_bounds.len();
    problem.partition().u_future().rows(0, m) * g
}

fn sorted_working(solution: &DeepcSolution) -> Vec<usize> {
    let mut set = solution.working_set.clone();
    set.sort_unstable();
    set
}

/// Re-solves the tracking program at the current window/reference,
/// refreshes the nominal point, and rebuilds the gains when the active set
/// moved.  Returns the new optimizer.
fn resolve_and_refresh(
    problem: &DeepcProblem,
    state: &mut DeeneState,
    window: &InitialWindow,
    w_now: &DVector<f64>,
    r_now: &DVector<f64>,
    step: usize,
) -> Result<DVector<f64>, String> {
    let warm = WarmStart {
        x: state.nominal.g.clone(),
        working_set: state.nominal.active_set.clone(),
    };
    let sol = problem
        .solve(window, r_now, Some(&warm))
        .map_err(|e| format!("step {step}: fallback re-solve failed: {e}"))?;
    let set = sorted_working(&sol);
    if set != state.gains.active_set {
        state.gains = CorrectionGains::for_problem(problem, &state.hessian, &set)
            .map_err(|e| format!("step {step}: gain rebuild failed: {e}"))?;
    }
    state.nominal = NominalPoint::from_solution(&sol, w_now.clone(), r_now.clone());
    Ok(sol.g)
}

/// Runs the closed loop, assembling the tracking problem from the partition
/// and configuration first.  See [`run_controller_with`].
pub fn run_controller(
    plant: &mut dyn Plant,
    partition: &HankelPartition,
    config: &DeepcConfig,
    reference: &ReferenceTrack,
    options: &ControllerOptions,
) -> Result<ClosedLoopTrace, DeeneError> {
    let problem = DeepcProblem::new(partition.clone(), config.clone())?;
    run_controller_with(plant, &problem, reference, options)
}

/// Runs the closed loop against a pre-assembled tracking problem.
///
/// The plant is first driven for `t_ini` bootstrap steps with seeded random
/// inputs inside the input bounds to fill the initial window; those steps
/// are recorded separately from the controlled trace.  Afterwards the loop
/// computes a plan every `min(s+1, N)` steps:
///
/// * `deepc` re-solves the quadratic program at every plan refresh and
///   replays the stored plan in between (open loop within a cycle);
/// * `deene` solves once, then at every refresh corrects the nominal
///   optimizer with precomputed gains, re-validating it through a
///   feasibility scan and a multiplier sign check; in between refreshes it
///   still corrects every step with the frozen gains (feedback at each
///   sample), so only the gain algebra — never the plant — waits for the
///   next refresh.  Any safeguard trip falls back to a full re-solve and is
///   counted.
///
/// Setup problems (dimension mismatches, bad options) return an error; a
/// solver failure mid-run stops early and returns the partial trace with
/// [`ClosedLoopTrace::aborted`] set.
pub fn run_controller_with(
    plant: &mut dyn Plant,
    problem: &DeepcProblem,
    reference: &ReferenceTrack,
    options: &ControllerOptions,
) -> Result<ClosedLoopTrace, DeeneError> {
    let config = problem.config();
    let m = config.input_bounds.len();
    let p = config.output_bounds.len();
    let n = config.horizon;
    if plant.input_dim() != m || plant.output_dim() != p {
        return Err(DeeneError::Dimension(format!(
            "plant is {}-in/{}-out but the problem is {m}-in/{p}-out",
            plant.input_dim(),
            plant.output_dim()
        )));
    }
    if reference.channels() != p {
        return Err(DeeneError::Dimension(format!(
            "reference has {} channels, outputs have {p}",
            reference.channels()
        )));
    }
    if options.open_loop_len > n {
        return Err(DeeneError::Dimension(format!(
            "open-loop length {} exceeds the horizon {n}",
            options.open_loop_len
        )));
    }
    if options.total_steps == 0 {
        return Err(DeeneError::Dimension("total_steps must be positive".into()));
    }
    if !options.safeguard_tol.is_finite() || options.safeguard_tol <= 0.0 {
        return Err(DeeneError::Dimension(format!(
            "safeguard tolerance must be positive and finite (got {})",
            options.safeguard_tol
        )));
    }
    if options.trust_radius.is_nan() || options.trust_radius <= 0.0 {
        return Err(DeeneError::Dimension(format!(
            "trust radius must be positive (got {})",
            options.trust_radius
        )));
    }
    if !options.bootstrap_scale.is_finite() || options.bootstrap_scale < 0.0 {
        return Err(DeeneError::Dimension(format!(
            "bootstrap scale must be finite and non-negative (got {})",
            options.bootstrap_scale
        )));
    }

    let macro_len = (options.open_loop_len + 1).min(n);
    let feasibility_tol = {
        let rows = problem.constraints();
        let h_inf = if rows.is_empty() { 0.0 } else { rows.rhs.amax() };
        options.safeguard_tol * (1.0 + h_inf)
    };

    // Bootstrap: fill the window with seeded random inputs inside the
    // bounds.  Zero scale holds each channel at its bound midpoint (zero on
    // symmetric or missing bounds), which keeps an equilibrium exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(options.bootstrap_seed);
    let mut boot_inputs = Vec::with_capacity(config.t_ini);
    let mut boot_outputs = Vec::with_capacity(config.t_ini);
    let mut bootstrap = Vec::with_capacity(config.t_ini);
    for _ in 0..config.t_ini {
        let u = DVector::from_fn(m, |c, _| {
            let draw: f64 = rng.random_range(-1.0..1.0);
            match config.input_bounds[c] {
                Some((lo, hi)) => {
                    let mid = 0.5 * (lo + hi);
                    let half = 0.5 * (hi - lo);
                    mid + options.bootstrap_scale * half * draw
                }
                None => options.bootstrap_scale * draw,
            }
        });
        let y = plant.step(&u);
        boot_inputs.push(u.clone());
        boot_outputs.push(y.clone());
        bootstrap.push((u, y));
    }
    let mut window = InitialWindow::new(boot_inputs, boot_outputs)?;

    let mut rows: Vec<TraceRow> = Vec::with_capacity(options.total_steps);
    let mut loop_seconds = Vec::new();
    let mut fallback_count = 0usize;
    let mut window_snapshots = Vec::new();
    let mut aborted = None;

    let mut deepc_state = DeepcState {
        plan: DVector::zeros(0),
        warm: None,
    };
    let mut deene_state: Option<DeeneState> = None;

    for k in 0..options.total_steps {
        let r_window = reference.window(k, n);
        let phase = k % macro_len;
        let is_refresh = phase == 0;
        let timer = options.record_timing.then(Instant::now);

        // Returns Err(reason) only for unrecoverable failures, which abort
        // the run and keep the partial trace.
        let stepped: Result<(DVector<f64>, bool, bool), String> = match options.mode {
            ControllerMode::Deepc => {
                if is_refresh {
                    match problem.solve(&window, &r_window, deepc_state.warm.as_ref()) {
                        Ok(sol) => {
                            deepc_state.warm = Some(WarmStart {
                                x: sol.g.clone(),
                                working_set: sol.working_set.clone(),
                            });
                            deepc_state.plan = sol.u;
                            Ok((deepc_state.plan.rows(0, m).into_owned(), true, false))
                        }
                        Err(e) => Err(format!("step {k}: tracking solve failed: {e}")),
                    }
                } else {
                    Ok((deepc_state.plan.rows(phase * m, m).into_owned(), false, false))
                }
            }
            ControllerMode::Deene => {
                let w_now = window.stacked();
                match deene_state.as_mut() {
                    None => {
                        // First step: the one full solve plus gain
                        // construction the rest of the run corrects from.
                        let build = || -> Result<(DeeneState, DVector<f64>), String> {
                            let sol = problem
                                .solve(&window, &r_window, None)
                                .map_err(|e| format!("step {k}: initial solve failed: {e}"))?;
                            let hessian = Arc::new(
                                HessianFactor::new(problem.hessian())
                                    .map_err(|e| format!("step {k}: Hessian factorization failed: {e}"))?,
                            );
                            let set = sorted_working(&sol);
                            let gains =
                                CorrectionGains::for_problem(problem, &hessian, &set)
                                    .map_err(|e| format!("step {k}: gain construction failed: {e}"))?;
                            let nominal = NominalPoint::from_solution(
                                &sol,
                                w_now.clone(),
                                r_window.clone(),
                            );
                            Ok((
                                DeeneState {
                                    hessian,
                                    nominal,
                                    gains,
                                },
                                sol.g,
                            ))
                        };
                        match build() {
                            Ok((state, g)) => {
                                let u = first_input(problem, &g);
                                deene_state = Some(state);
                                Ok((u, true, false))
                            }
                            Err(e) => Err(e),
                        }
                    }
                    Some(state) => {
                        let delta_w = &w_now - &state.nominal.window;
                        let delta_r = &r_window - &state.nominal.reference;
                        let trusted = (delta_w.norm_squared() + delta_r.norm_squared()).sqrt()
                            <= options.trust_radius;
                        if is_refresh {
                            // Plan refresh: correct from the nominal point
                            // (self-correcting form), then re-certify
                            // optimality before adopting it as the new
                            // nominal.
                            let mut accepted: Option<(DVector<f64>, DVector<f64>)> = None;
                            if trusted {
                                let grad0 = stacked_gradient(
                                    problem,
                                    &state.nominal.g,
                                    &state.nominal.window,
                                    &state.nominal.reference,
                                );
                                if let Ok(step) = correct_nonoptimal(
                                    &state.gains,
                                    &state.nominal,
                                    &delta_w,
                                    &delta_r,
                                    &grad0,
                                ) {
                                    let g_star = &state.nominal.g + &step.delta_g;
                                    if max_violation(problem, &g_star) <= feasibility_tol {
                                        let grad_star =
                                            stacked_gradient(problem, &g_star, &w_now, &r_window);
                                        if let Ok(mu) = recover_multipliers(
                                            &grad_star,
                                            state.gains.factorization().rows(),
                                        ) {
                                            let sign_ok = mu.is_empty()
                                                || mu.min()
                                                    >= -options.safeguard_tol * (1.0 + mu.amax());
                                            if sign_ok {
                                                accepted = Some((g_star, mu));
                                            }
                                        }
                                    }
                                }
                            }
                            match accepted {
                                Some((g_star, mu)) => {
                                    state.nominal = NominalPoint {
                                        g: g_star.clone(),
                                        window: w_now,
                                        reference: r_window.clone(),
                                        multipliers: mu,
                                        active_set: state.gains.active_set.clone(),
                                        is_optimal: true,
                                    };
                                    Ok((first_input(problem, &g_star), true, false))
                                }
                                None => match resolve_and_refresh(
                                    problem, state, &window, &w_now, &r_window, k,
                                ) {
                                    Ok(g) => Ok((first_input(problem, &g), true, true)),
                                    Err(e) => Err(e),
                                },
                            }
                        } else {
                            // Between refreshes: feedback through the frozen
                            // gains.  The nominal stays put; only the cheap
                            // matrix-vector correction tracks the measured
                            // window and the advancing reference.
                            let mut corrected: Option<DVector<f64>> = None;
                            if trusted {
                                if let Ok(step) = correct_optimal(
                                    &state.gains,
                                    &state.nominal,
                                    &delta_w,
                                    &delta_r,
                                ) {
                                    let g_star = &state.nominal.g + &step.delta_g;
                                    if max_violation(problem, &g_star) <= feasibility_tol {
                                        corrected = Some(g_star);
                                    }
                                }
                            }
                            match corrected {
                                Some(g_star) => Ok((first_input(problem, &g_star), false, false)),
                                None => match resolve_and_refresh(
                                    problem, state, &window, &w_now, &r_window, k,
                                ) {
                                    Ok(g) => Ok((first_input(problem, &g), false, true)),
                                    Err(e) => Err(e),
                                },
                            }
                        }
                    }
                }
            }
        };

        let (u, refreshed_plan, fell_back) = match stepped {
            Ok(v) => v,
            Err(reason) => {
                aborted = Some(reason);
                break;
            }
        };
        let compute_seconds = timer.map(|t| t.elapsed().as_secs_f64());
        // The deepc mode does no controller work while replaying a stored
        // plan, so those steps carry no compute time.
        let compute_seconds = if options.mode == ControllerMode::Deepc && !refreshed_plan {
            None
        } else {
            compute_seconds
        };
        if refreshed_plan && k > 0 {
            if let Some(dt) = compute_seconds {
                loop_seconds.push(dt);
            }
        }
        if fell_back {
            fallback_count += 1;
        }

        let y = plant.step(&u);
        rows.push(TraceRow {
            step: k,
            input: u.clone(),
            output: y.clone(),
            reference: reference.point(k).clone(),
            compute_seconds,
            fallback: fell_back,
        });
        window.shift(u, y);
        if options.record_windows {
            window_snapshots.push((k, window.stacked()));
        }
    }

    Ok(ClosedLoopTrace {
        mode: options.mode,
        open_loop_len: options.open_loop_len,
        bootstrap,
        rows,
        loop_seconds,
        fallback_count,
        window_snapshots,
        aborted,
    })
}
