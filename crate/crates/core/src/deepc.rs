//! Data-driven receding-horizon tracking over a Hankel combination vector.
//!
//! With recorded data split into past/future blocks `U_P, Y_P, U_F, Y_F`
//! (see [`crate::signal::HankelPartition`]), every length-`N` plant
//! behaviour consistent with the most recent window `(u_ini, y_ini)` is a
//! column combination `g`: predicted inputs are `u = U_F g`, predicted
//! outputs `y = Y_F g`, and the window match residuals
//! `σ_u = U_P g − u_ini`, `σ_y = Y_P g − y_ini` are penalised rather than
//! pinned so noisy data stays feasible.  The tracking objective
//!
//! ```text
//! J(g) = ‖Y_F g − r‖²_Q + ‖U_F g‖²_R
//!        + λ_y‖Y_P g − y_ini‖² + λ_u‖U_P g − u_ini‖² + λ_g‖g‖²
//! ```
//!
//! is a strictly convex quadratic in `g` whenever `λ_g > 0`; input/output
//! bounds and extra halfspaces become affine rows over `g`.  This module
//! assembles that program, exposes its exact derivative maps (the
//! sensitivity machinery in [`crate::deene`] consumes them), solves it via
//! the exact active-set solver in [`crate::qp`], and provides the
//! closed-form gains of the unconstrained special case.

use crate::qp::{HessianFactor, QpError, QuadraticProgram, QpSolution, WarmStart};
use crate::signal::HankelPartition;
use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::time::Instant;

/// Errors from problem assembly and solving.
#[derive(Debug)]
pub enum DeepcError {
    /// Incompatible dimensions; the message names the offending block.
    Dimension(String),
    /// A configuration value violates its documented range.
    InvalidConfig(String),
    /// The underlying quadratic-program solver failed.
    Solver(QpError),
}

impl fmt::Display for DeepcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeepcError::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            DeepcError::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            DeepcError::Solver(e) => write!(f, "tracking problem solve failed: {e}"),
        }
    }
}

impl std::error::Error for DeepcError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DeepcError::Solver(e) => Some(e),
            _ => None,
        }
    }
}

impl From<QpError> for DeepcError {
    fn from(e: QpError) -> Self {
        DeepcError::Solver(e)
    }
}

/// One affine constraint `a_y·y + a_u·u ≤ b` over the stacked predicted
/// outputs `y` (length `p·N`) and inputs `u` (length `m·N`).
#[derive(Debug, Clone)]
pub struct Halfspace {
    /// Coefficients on the stacked predicted outputs (length `p·N`).
    pub a_y: DVector<f64>,
    /// Coefficients on the stacked predicted inputs (length `m·N`).
    pub a_u: DVector<f64>,
    /// Right-hand side.
    pub b: f64,
}

/// Weights, horizons and constraint declarations for the tracking problem.
///
/// `q` weighs tracking error over the whole output horizon (`p·N × p·N`,
/// positive semi-definite), `r_weight` the inputs (`m·N × m·N`).  The
/// scalar weights `lambda_y`/`lambda_u` penalise the window-match
/// residuals and `lambda_g` regularises the combination vector itself;
/// `lambda_g > 0` makes the problem strictly convex no matter what the
/// data is.  Bounds are per physical channel and replicated over the
/// horizon; `None` (or an infinite endpoint) leaves that side unbounded.
#[derive(Debug, Clone)]
pub struct DeepcConfig {
    pub q: DMatrix<f64>,
    pub r_weight: DMatrix<f64>,
    pub lambda_y: f64,
    pub lambda_u: f64,
    pub lambda_g: f64,
    pub t_ini: usize,
    pub horizon: usize,
    /// Per-input-channel `[lo, hi]` bounds (length must equal `m`).
    pub input_bounds: Vec<Option<(f64, f64)>>,
    /// Per-output-channel `[lo, hi]` bounds (length must equal `p`).
    pub output_bounds: Vec<Option<(f64, f64)>>,
    /// Additional affine constraints over the stacked `(y, u)`.
    pub extra_halfspaces: Vec<Halfspace>,
}

impl DeepcConfig {
    /// Scaled-identity weights: `Q = q_scale·I`, `R = r_scale·I`, no
    /// bounds.  This is the shape every experiment in the crate uses.
    #[allow(clippy::too_many_arguments)]
    pub fn scaled_identity(
        input_dim: usize,
        output_dim: usize,
        t_ini: usize,
        horizon: usize,
        q_scale: f64,
        r_scale: f64,
        lambda_y: f64,
        lambda_u: f64,
        lambda_g: f64,
    ) -> Self {
        DeepcConfig {
            q: DMatrix::identity(output_dim * horizon, output_dim * horizon) * q_scale,
            r_weight: DMatrix::identity(input_dim * horizon, input_dim * horizon) * r_scale,
            lambda_y,
            lambda_u,
            lambda_g,
            t_ini,
            horizon,
            input_bounds: vec![None; input_dim],
            output_bounds: vec![None; output_dim],
            extra_halfspaces: Vec::new(),
        }
    }

    /// Sets the same `[lo, hi]` bound on every input channel.
    pub fn with_uniform_input_bounds(mut self, lo: f64, hi: f64) -> Self {
        for b in self.input_bounds.iter_mut() {
            *b = Some((lo, hi));
        }
        self
    }

    /// Sets the same `[lo, hi]` bound on every output channel.
    pub fn with_uniform_output_bounds(mut self, lo: f64, hi: f64) -> Self {
        for b in self.output_bounds.iter_mut() {
            *b = Some((lo, hi));
        }
        self
    }

    /// Validates the configuration against a data partition.
    fn validate(&self, partition: &HankelPartition) -> Result<(), DeepcError> {
        let m = partition.input_dim();
        let p = partition.output_dim();
        let n = self.horizon;
        if self.t_ini != partition.t_ini() || self.horizon != partition.horizon() {
            return Err(DeepcError::Dimension(format!(
                "config horizons (t_ini={}, horizon={}) do not match the data partition \
                 (t_ini={}, horizon={})",
                self.t_ini,
                self.horizon,
                partition.t_ini(),
                partition.horizon()
            )));
        }
        if self.q.nrows() != p * n || self.q.ncols() != p * n {
            return Err(DeepcError::Dimension(format!(
                "tracking weight Q is {}×{}, expected {}×{} (output_dim·horizon)",
                self.q.nrows(),
                self.q.ncols(),
                p * n,
                p * n
            )));
        }
        if self.r_weight.nrows() != m * n || self.r_weight.ncols() != m * n {
            return Err(DeepcError::Dimension(format!(
                "input weight R is {}×{}, expected {}×{} (input_dim·horizon)",
                self.r_weight.nrows(),
                self.r_weight.ncols(),
                m * n,
                m * n
            )));
        }
        if self.input_bounds.len() != m {
            return Err(DeepcError::Dimension(format!(
                "input_bounds has {} channels, data has {}",
                self.input_bounds.len(),
                m
            )));
        }
        if self.output_bounds.len() != p {
            return Err(DeepcError::Dimension(format!(
                "output_bounds has {} channels, data has {}",
                self.output_bounds.len(),
                p
            )));
        }
        if self.lambda_g <= 0.0 || self.lambda_g.is_nan() {
            return Err(DeepcError::InvalidConfig(format!(
                "lambda_g must be positive (got {}); it guarantees strict convexity",
                self.lambda_g
            )));
        }
        if self.lambda_y < 0.0 || self.lambda_u < 0.0 {
            return Err(DeepcError::InvalidConfig(format!(
                "lambda_y and lambda_u must be nonnegative (got {}, {})",
                self.lambda_y, self.lambda_u
            )));
        }
        for (c, b) in self.input_bounds.iter().enumerate() {
            if let Some((lo, hi)) = b {
                if lo > hi || lo.is_nan() || hi.is_nan() {
                    return Err(DeepcError::InvalidConfig(format!(
                        "input channel {c} bound [{lo}, {hi}] has lo > hi"
                    )));
                }
            }
        }
        for (c, b) in self.output_bounds.iter().enumerate() {
            if let Some((lo, hi)) = b {
                if lo > hi || lo.is_nan() || hi.is_nan() {
                    return Err(DeepcError::InvalidConfig(format!(
                        "output channel {c} bound [{lo}, {hi}] has lo > hi"
                    )));
                }
            }
        }
        for (i, hs) in self.extra_halfspaces.iter().enumerate() {
            if hs.a_y.len() != p * n || hs.a_u.len() != m * n {
                return Err(DeepcError::Dimension(format!(
                    "halfspace {i} has coefficient lengths ({}, {}), expected ({}, {})",
                    hs.a_y.len(),
                    hs.a_u.len(),
                    p * n,
                    m * n
                )));
            }
        }
        Ok(())
    }
}

/// The most recent `T_ini` input/output samples, oldest first.
///
/// The stacked form is inputs-then-outputs, each block in time order:
/// `w_ini = [u(k−T_ini+1); …; u(k); y(k−T_ini+1); …; y(k)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialWindow {
    u_ini: Vec<DVector<f64>>,
    y_ini: Vec<DVector<f64>>,
}

impl InitialWindow {
    pub fn new(
        u_ini: Vec<DVector<f64>>,
        y_ini: Vec<DVector<f64>>,
    ) -> Result<Self, DeepcError> {
        if u_ini.is_empty() || u_ini.len() != y_ini.len() {
            return Err(DeepcError::Dimension(format!(
                "window needs equal, nonzero sample counts (got {} inputs, {} outputs)",
                u_ini.len(),
                y_ini.len()
            )));
        }
        let m = u_ini[0].len();
        let p = y_ini[0].len();
        if u_ini.iter().any(|u| u.len() != m) || y_ini.iter().any(|y| y.len() != p) {
            return Err(DeepcError::Dimension(
                "window samples have inconsistent channel counts".into(),
            ));
        }
        Ok(InitialWindow { u_ini, y_ini })
    }

    /// An all-zero window (plant resting at the origin).
    pub fn zeros(input_dim: usize, output_dim: usize, t_ini: usize) -> Self {
        InitialWindow {
            u_ini: vec![DVector::zeros(input_dim); t_ini],
            y_ini: vec![DVector::zeros(output_dim); t_ini],
        }
    }

    pub fn t_ini(&self) -> usize {
        self.u_ini.len()
    }

    pub fn input_dim(&self) -> usize {
        self.u_ini[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.y_ini[0].len()
    }

    /// Drops the oldest sample and appends the newest, keeping the window
    /// length fixed — the receding-horizon update rule.
    pub fn shift(&mut self, u: DVector<f64>, y: DVector<f64>) {
        debug_assert_eq!(u.len(), self.input_dim());
        debug_assert_eq!(y.len(), self.output_dim());
        self.u_ini.remove(0);
        self.u_ini.push(u);
        self.y_ini.remove(0);
        self.y_ini.push(y);
    }

    /// Stacked inputs `u_ini` (length `m·T_ini`, oldest first).
    pub fn stacked_inputs(&self) -> DVector<f64> {
        stack_samples(&self.u_ini)
    }

    /// Stacked outputs `y_ini` (length `p·T_ini`, oldest first).
    pub fn stacked_outputs(&self) -> DVector<f64> {
        stack_samples(&self.y_ini)
    }

    /// The full window vector `w_ini = [u_ini; y_ini]`.
    pub fn stacked(&self) -> DVector<f64> {
        let u = self.stacked_inputs();
        let y = self.stacked_outputs();
        let mut w = DVector::zeros(u.len() + y.len());
        w.rows_mut(0, u.len()).copy_from(&u);
        w.rows_mut(u.len(), y.len()).copy_from(&y);
        w
    }
}

fn stack_samples(samples: &[DVector<f64>]) -> DVector<f64> {
    let d = samples[0].len();
    DVector::from_fn(samples.len() * d, |i, _| samples[i / d][i % d])
}

/// What a constraint row encodes; indices are horizon step and physical
/// channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    InputUpper { step: usize, channel: usize },
    InputLower { step: usize, channel: usize },
    OutputUpper { step: usize, channel: usize },
    OutputLower { step: usize, channel: usize },
    /// Index into `DeepcConfig::extra_halfspaces`.
    Halfspace { index: usize },
}

/// Affine constraint rows `G g ≤ h` over the combination vector, with one
/// [`RowKind`] label per row.
///
/// Row order is stable: input upper bounds, input lower bounds, output
/// upper bounds, output lower bounds (each step-major, channel-minor,
/// matching the stacked signal layout, with non-finite or absent bounds
/// skipped), then extra halfspaces in declaration order.
#[derive(Debug, Clone)]
pub struct ConstraintRows {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub kinds: Vec<RowKind>,
}

impl ConstraintRows {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// Quadratic cost pieces at a fixed window and reference:
/// `J(g) = 1/2 gᵀ·hessian·g + gradient_at_zeroᵀ·g + constant`.
#[derive(Debug, Clone)]
pub struct AssembledCost {
    pub hessian: DMatrix<f64>,
    pub gradient_at_zero: DVector<f64>,
    pub constant: f64,
}

/// `∂J/∂g∂w_ini` — the linear map from the stacked window `[u_ini; y_ini]`
/// to the gradient's window-dependent part: `[−2λ_u·U_Pᵀ | −2λ_y·Y_Pᵀ]`.
pub fn gradient_window_map(partition: &HankelPartition, config: &DeepcConfig) -> DMatrix<f64> {
    let l = partition.num_columns();
    let m_ti = partition.input_dim() * partition.t_ini();
    let p_ti = partition.output_dim() * partition.t_ini();
    let mut map = DMatrix::zeros(l, m_ti + p_ti);
    map.view_mut((0, 0), (l, m_ti))
        .copy_from(&(partition.u_past().transpose() * (-2.0 * config.lambda_u)));
    map.view_mut((0, m_ti), (l, p_ti))
        .copy_from(&(partition.y_past().transpose() * (-2.0 * config.lambda_y)));
    map
}

/// `∂J/∂g∂r` — the linear map from the reference to the gradient's
/// reference-dependent part: `−2·Y_FᵀQ`.
pub fn gradient_reference_map(partition: &HankelPartition, config: &DeepcConfig) -> DMatrix<f64> {
    -2.0 * partition.y_future().transpose() * &config.q
}

/// Assembles the quadratic cost at a fixed window and reference.
///
/// The Hessian is `2(Y_FᵀQY_F + U_FᵀRU_F + λ_y Y_PᵀY_P + λ_u U_PᵀU_P + λ_g I)`
/// and is independent of `(w_ini, r)`; only the affine pieces move between
/// control steps.
pub fn assemble_cost(
    partition: &HankelPartition,
    config: &DeepcConfig,
    window: &InitialWindow,
    reference: &DVector<f64>,
) -> Result<AssembledCost, DeepcError> {
    config.validate(partition)?;
    check_window_and_reference(partition, window, reference)?;
    let hessian = assemble_hessian(partition, config);
    let gradient_at_zero = gradient_window_map(partition, config) * window.stacked()
        + gradient_reference_map(partition, config) * reference;
    let constant = (&config.q * reference).dot(reference)
        + config.lambda_y * window.stacked_outputs().norm_squared()
        + config.lambda_u * window.stacked_inputs().norm_squared();
    Ok(AssembledCost {
        hessian,
        gradient_at_zero,
        constant,
    })
}

fn assemble_hessian(partition: &HankelPartition, config: &DeepcConfig) -> DMatrix<f64> {
    let l = partition.num_columns();
    let yf = partition.y_future();
    let uf = partition.u_future();
    let yp = partition.y_past();
    let up = partition.u_past();
    let mut h = yf.transpose() * &config.q * yf + uf.transpose() * &config.r_weight * uf;
    if config.lambda_y != 0.0 {
        h += config.lambda_y * (yp.transpose() * yp);
    }
    if config.lambda_u != 0.0 {
        h += config.lambda_u * (up.transpose() * up);
    }
    for i in 0..l {
        h[(i, i)] += config.lambda_g;
    }
    h *= 2.0;
    // The products above are symmetric only up to round-off; make it exact
    // so downstream factorizations never reject the matrix.
    for i in 0..l {
        for j in (i + 1)..l {
            let avg = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = avg;
            h[(j, i)] = avg;
        }
    }
    h
}

fn check_window_and_reference(
    partition: &HankelPartition,
    window: &InitialWindow,
    reference: &DVector<f64>,
) -> Result<(), DeepcError> {
    if window.t_ini() != partition.t_ini()
        || window.input_dim() != partition.input_dim()
        || window.output_dim() != partition.output_dim()
    {
        return Err(DeepcError::Dimension(format!(
            "window is {} samples of ({} in, {} out), partition expects {} of ({}, {})",
            window.t_ini(),
            window.input_dim(),
            window.output_dim(),
            partition.t_ini(),
            partition.input_dim(),
            partition.output_dim()
        )));
    }
    let expect = partition.output_dim() * partition.horizon();
    if reference.len() != expect {
        return Err(DeepcError::Dimension(format!(
            "reference has length {}, expected output_dim·horizon = {}",
            reference.len(),
            expect
        )));
    }
    Ok(())
}

/// Evaluates the scalar tracking cost from its definition (no assembled
/// matrices involved) — the independent oracle the derivative maps are
/// tested against.
pub fn tracking_cost(
    partition: &HankelPartition,
    config: &DeepcConfig,
    window: &InitialWindow,
    reference: &DVector<f64>,
    g: &DVector<f64>,
) -> f64 {
    let y_err = partition.y_future() * g - reference;
    let u = partition.u_future() * g;
    let sigma_y = partition.y_past() * g - window.stacked_outputs();
    let sigma_u = partition.u_past() * g - window.stacked_inputs();
    (&config.q * &y_err).dot(&y_err)
        + (&config.r_weight * &u).dot(&u)
        + config.lambda_y * sigma_y.norm_squared()
        + config.lambda_u * sigma_u.norm_squared()
        + config.lambda_g * g.norm_squared()
}

/// Builds the affine constraint rows `G g ≤ h` declared by the config.
pub fn assemble_constraints(
    partition: &HankelPartition,
    config: &DeepcConfig,
) -> Result<ConstraintRows, DeepcError> {
    config.validate(partition)?;
    let m = partition.input_dim();
    let p = partition.output_dim();
    let n = config.horizon;
    let l = partition.num_columns();
    let mut rows: Vec<(DVector<f64>, f64, RowKind)> = Vec::new();

    let push_bound_rows = |rows: &mut Vec<(DVector<f64>, f64, RowKind)>,
                           block: &DMatrix<f64>,
                           channels: usize,
                           bounds: &[Option<(f64, f64)>],
                           upper: bool,
                           kind: fn(usize, usize) -> RowKind| {
        for step in 0..n {
            for (channel, bound) in bounds.iter().enumerate().take(channels) {
                let Some((lo, hi)) = *bound else {
                    continue;
                };
                let value = if upper { hi } else { lo };
                if !value.is_finite() {
                    continue;
                }
                let row = block.row(step * channels + channel).transpose();
                if upper {
                    rows.push((row, value, kind(step, channel)));
                } else {
                    rows.push((-row, -value, kind(step, channel)));
                }
            }
        }
    };

    push_bound_rows(
        &mut rows,
        partition.u_future(),
        m,
        &config.input_bounds,
        true,
        |step, channel| RowKind::InputUpper { step, channel },
    );
    push_bound_rows(
        &mut rows,
        partition.u_future(),
        m,
        &config.input_bounds,
        false,
        |step, channel| RowKind::InputLower { step, channel },
    );
    push_bound_rows(
        &mut rows,
        partition.y_future(),
        p,
        &config.output_bounds,
        true,
        |step, channel| RowKind::OutputUpper { step, channel },
    );
    push_bound_rows(
        &mut rows,
        partition.y_future(),
        p,
        &config.output_bounds,
        false,
        |step, channel| RowKind::OutputLower { step, channel },
    );
    for (index, hs) in config.extra_halfspaces.iter().enumerate() {
        let row = partition.y_future().transpose() * &hs.a_y
            + partition.u_future().transpose() * &hs.a_u;
        rows.push((row, hs.b, RowKind::Halfspace { index }));
    }

    let mut matrix = DMatrix::zeros(rows.len(), l);
    let mut rhs = DVector::zeros(rows.len());
    let mut kinds = Vec::with_capacity(rows.len());
    for (i, (row, b, kind)) in rows.into_iter().enumerate() {
        matrix.row_mut(i).copy_from(&row.transpose());
        rhs[i] = b;
        kinds.push(kind);
    }
    Ok(ConstraintRows { matrix, rhs, kinds })
}

/// A solved instance of the tracking problem.
#[derive(Debug, Clone)]
pub struct DeepcSolution {
    /// Optimal combination vector (length `L`).
    pub g: DVector<f64>,
    /// Planned inputs `U_F·g` (length `m·N`, step-major).
    pub u: DVector<f64>,
    /// Predicted outputs `Y_F·g` (length `p·N`).
    pub y: DVector<f64>,
    /// Input window residual `U_P·g − u_ini`.
    pub sigma_u: DVector<f64>,
    /// Output window residual `Y_P·g − y_ini`.
    pub sigma_y: DVector<f64>,
    /// Inequality multipliers, one per constraint row.
    pub multipliers: DVector<f64>,
    /// Rows whose slack is within the solver's activity tolerance.
    pub active_set: Vec<usize>,
    /// Rows the solver held as equalities at the optimum.
    pub working_set: Vec<usize>,
    /// Full cost `J(g)` including the constant term.
    pub objective: f64,
    pub iterations: usize,
    /// Wall-clock seconds spent inside the quadratic-program solve.
    pub solve_time: f64,
}

/// The tracking problem with everything that does not depend on
/// `(w_ini, r)` assembled once: the Hessian, the gradient's window and
/// reference maps, and the constraint rows.  Re-solving at a new window
/// and reference only rebuilds the linear term.
#[derive(Debug, Clone)]
pub struct DeepcProblem {
    partition: HankelPartition,
    config: DeepcConfig,
    hessian: DMatrix<f64>,
    grad_window_map: DMatrix<f64>,
    grad_reference_map: DMatrix<f64>,
    constraints: ConstraintRows,
}

impl DeepcProblem {
    pub fn new(partition: HankelPartition, config: DeepcConfig) -> Result<Self, DeepcError> {
        config.validate(&partition)?;
        let hessian = assemble_hessian(&partition, &config);
        let grad_window_map = gradient_window_map(&partition, &config);
        let grad_reference_map = gradient_reference_map(&partition, &config);
        let constraints = assemble_constraints(&partition, &config)?;
        Ok(DeepcProblem {
            partition,
            config,
            hessian,
            grad_window_map,
            grad_reference_map,
            constraints,
        })
    }

    /// Decision dimension `L` (columns of the data partition).
    pub fn dim(&self) -> usize {
        self.partition.num_columns()
    }

    pub fn partition(&self) -> &HankelPartition {
        &self.partition
    }

    pub fn config(&self) -> &DeepcConfig {
        &self.config
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn gradient_window_map(&self) -> &DMatrix<f64> {
        &self.grad_window_map
    }

    pub fn gradient_reference_map(&self) -> &DMatrix<f64> {
        &self.grad_reference_map
    }

    pub fn constraints(&self) -> &ConstraintRows {
        &self.constraints
    }

    /// The gradient's affine part `f(w_ini, r)` so that
    /// `∇J(g) = H·g + f`.
    pub fn linear_term(
        &self,
        window: &InitialWindow,
        reference: &DVector<f64>,
    ) -> Result<DVector<f64>, DeepcError> {
        check_window_and_reference(&self.partition, window, reference)?;
        Ok(&self.grad_window_map * window.stacked() + &self.grad_reference_map * reference)
    }

    /// The cost's constant term (value of `J` at `g = 0` minus nothing —
    /// the piece the quadratic form cannot see).
    pub fn constant_term(&self, window: &InitialWindow, reference: &DVector<f64>) -> f64 {
        (&self.config.q * reference).dot(reference)
            + self.config.lambda_y * window.stacked_outputs().norm_squared()
            + self.config.lambda_u * window.stacked_inputs().norm_squared()
    }

    /// Exact gradient `∇J(g) = H·g + f(w_ini, r)`.
    pub fn gradient(
        &self,
        g: &DVector<f64>,
        window: &InitialWindow,
        reference: &DVector<f64>,
    ) -> Result<DVector<f64>, DeepcError> {
        Ok(&self.hessian * g + self.linear_term(window, reference)?)
    }

    /// Full cost `J(g)` at any point, via the assembled pieces.
    pub fn cost(
        &self,
        g: &DVector<f64>,
        window: &InitialWindow,
        reference: &DVector<f64>,
    ) -> Result<f64, DeepcError> {
        let f = self.linear_term(window, reference)?;
        Ok(0.5 * (&self.hessian * g).dot(g) + f.dot(g) + self.constant_term(window, reference))
    }

    /// Builds the ready-to-solve quadratic program for one step.
    pub fn to_qp(
        &self,
        window: &InitialWindow,
        reference: &DVector<f64>,
    ) -> Result<QuadraticProgram, DeepcError> {
        let f = self.linear_term(window, reference)?;
        QuadraticProgram::new(
            self.hessian.clone(),
            f,
            self.constraints.matrix.clone(),
            self.constraints.rhs.clone(),
        )
        .map_err(DeepcError::from)
    }

    /// Solves the tracking problem at one window/reference pair.
    pub fn solve(
        &self,
        window: &InitialWindow,
        reference: &DVector<f64>,
        warm: Option<&WarmStart>,
    ) -> Result<DeepcSolution, DeepcError> {
        let qp = self.to_qp(window, reference)?;
        let started = Instant::now();
        let sol = qp.solve(warm)?;
        let solve_time = started.elapsed().as_secs_f64();
        self.finish_solution(sol, window, reference, solve_time)
    }

    fn finish_solution(
        &self,
        sol: QpSolution,
        window: &InitialWindow,
        reference: &DVector<f64>,
        solve_time: f64,
    ) -> Result<DeepcSolution, DeepcError> {
        let g = sol.x;
        let u = self.partition.u_future() * &g;
        let y = self.partition.y_future() * &g;
        let sigma_u = self.partition.u_past() * &g - window.stacked_inputs();
        let sigma_y = self.partition.y_past() * &g - window.stacked_outputs();
        let objective = sol.objective + self.constant_term(window, reference);
        // The assembled quadratic and the from-definition cost must agree at
        // the optimizer; a mismatch means the assembly is wrong.
        let direct = tracking_cost(&self.partition, &self.config, window, reference, &g);
        let scale = 1.0 + direct.abs();
        if (objective - direct).abs() > 1e-7 * scale {
            return Err(DeepcError::Solver(QpError::Numerical(format!(
                "assembled objective {objective} disagrees with direct cost {direct}"
            ))));
        }
        Ok(DeepcSolution {
            g,
            u,
            y,
            sigma_u,
            sigma_y,
            multipliers: sol.multipliers,
            active_set: sol.active_set,
            working_set: sol.working_set,
            objective,
            iterations: sol.iterations,
            solve_time,
        })
    }

    /// Closed-form gains of the unconstrained problem (see
    /// [`unconstrained_gains`]).
    pub fn unconstrained_gains(&self) -> Result<UnconstrainedGains, DeepcError> {
        unconstrained_gains_from(&self.partition, &self.hessian, &self.grad_window_map, &self.grad_reference_map)
    }
}

/// The closed-form solution maps of the unconstrained problem: the
/// optimal planned input is `u* = reference_gain·r + window_gain·w_ini`.
#[derive(Debug, Clone)]
pub struct UnconstrainedGains {
    /// `m·N × p·N` map from the reference to the optimal input plan.
    pub reference_gain: DMatrix<f64>,
    /// `m·N × (m+p)·T_ini` map from the stacked window to the plan.
    pub window_gain: DMatrix<f64>,
}

/// Computes the closed-form unconstrained gains.
///
/// With no inequality rows the optimum is `g* = −H⁻¹(J_gw·w + J_gr·r)`,
/// so `u* = U_F g*` splits into the two linear maps returned here.
pub fn unconstrained_gains(
    partition: &HankelPartition,
    config: &DeepcConfig,
) -> Result<UnconstrainedGains, DeepcError> {
    config.validate(partition)?;
    let hessian = assemble_hessian(partition, config);
    let grad_w = gradient_window_map(partition, config);
    let grad_r = gradient_reference_map(partition, config);
    unconstrained_gains_from(partition, &hessian, &grad_w, &grad_r)
}

fn unconstrained_gains_from(
    partition: &HankelPartition,
    hessian: &DMatrix<f64>,
    grad_w: &DMatrix<f64>,
    grad_r: &DMatrix<f64>,
) -> Result<UnconstrainedGains, DeepcError> {
    let factor = HessianFactor::new(hessian)?;
    let uf = partition.u_future();
    let reference_gain = -(uf * factor.solve_mat(grad_r));
    let window_gain = -(uf * factor.solve_mat(grad_w));
    Ok(UnconstrainedGains {
        reference_gain,
        window_gain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{build_mosaic_hankel, IOTrajectory};
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Random data partition with the requested shape.
    fn random_partition(
        m: usize,
        p: usize,
        t_ini: usize,
        horizon: usize,
        len: usize,
        seed: u64,
    ) -> HankelPartition {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = |d: usize, rng: &mut ChaCha8Rng| {
            DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))
        };
        let inputs: Vec<DVector<f64>> = (0..len).map(|_| sample(m, &mut rng)).collect();
        let outputs: Vec<DVector<f64>> = (0..len).map(|_| sample(p, &mut rng)).collect();
        let traj = IOTrajectory::new(inputs, outputs, 0.1).unwrap();
        build_mosaic_hankel(&[traj], t_ini, horizon).unwrap()
    }

    fn random_window(m: usize, p: usize, t_ini: usize, rng: &mut ChaCha8Rng) -> InitialWindow {
        InitialWindow::new(
            (0..t_ini)
                .map(|_| DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            (0..t_ini)
                .map(|_| DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pure_regularization_gives_scaled_identity_hessian() {
        let part = random_partition(1, 1, 2, 3, 20, 1);
        let config = DeepcConfig::scaled_identity(1, 1, 2, 3, 0.0, 0.0, 0.0, 0.0, 7.0);
        let window = InitialWindow::zeros(1, 1, 2);
        let r = DVector::zeros(3);
        let cost = assemble_cost(&part, &config, &window, &r).unwrap();
        let l = part.num_columns();
        assert_eq!(cost.hessian, DMatrix::identity(l, l) * 14.0);
        assert_eq!(cost.gradient_at_zero, DVector::zeros(l));
        assert_eq!(cost.constant, 0.0);
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let m = 2;
        let p = 2;
        let t_ini = 3;
        let n = 4;
        let part = random_partition(m, p, t_ini, n, 40, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut config = DeepcConfig::scaled_identity(m, p, t_ini, n, 3.0, 0.7, 2.5, 1.5, 0.9);
        // Make Q a non-diagonal PSD matrix so the test sees the general path.
        let a = DMatrix::from_fn(p * n, p * n, |_, _| rng.random_range(-0.3..0.3));
        config.q += &a * a.transpose();
        let window = random_window(m, p, t_ini, &mut rng);
        let r = DVector::from_fn(p * n, |_, _| rng.random_range(-1.0..1.0));
        let problem = DeepcProblem::new(part.clone(), config.clone()).unwrap();

        for trial in 0..10 {
            let g = DVector::from_fn(part.num_columns(), |_, _| rng.random_range(-1.0..1.0));
            let grad = problem.gradient(&g, &window, &r).unwrap();
            let dir = DVector::from_fn(g.len(), |_, _| rng.random_range(-1.0..1.0)).normalize();
            let h = 1e-5 * (1.0 + g.norm());
            let plus = tracking_cost(&part, &config, &window, &r, &(&g + h * &dir));
            let minus = tracking_cost(&part, &config, &window, &r, &(&g - h * &dir));
            let fd = (plus - minus) / (2.0 * h);
            let exact = grad.dot(&dir);
            assert_abs_diff_eq!(fd, exact, epsilon = 1e-6 * (1.0 + exact.abs()));

            // Second derivative along the same direction.
            let mid = tracking_cost(&part, &config, &window, &r, &g);
            let fd2 = (plus - 2.0 * mid + minus) / (h * h);
            let exact2 = (problem.hessian() * &dir).dot(&dir);
            assert_abs_diff_eq!(fd2, exact2, epsilon = 1e-5 * (1.0 + exact2.abs()));
            let _ = trial;
        }

        // Window and reference maps against finite differences in (w, r).
        let g = DVector::from_fn(part.num_columns(), |_, _| rng.random_range(-1.0..1.0));
        let grad0 = problem.gradient(&g, &window, &r).unwrap();
        let h = 1e-5;
        for idx in 0..(p * n) {
            let mut r2 = r.clone();
            r2[idx] += h;
            let grad_plus = problem.gradient(&g, &window, &r2).unwrap();
            let fd_col = (grad_plus - &grad0) / h;
            let map_col = problem.gradient_reference_map().column(idx).into_owned();
            assert!((fd_col - map_col).norm() < 1e-6 * (1.0 + problem.gradient_reference_map().column(idx).norm()));
        }
    }

    #[test]
    fn hessian_smallest_eigenvalue_respects_regularization() {
        let part = random_partition(1, 2, 2, 3, 30, 4);
        let config = DeepcConfig::scaled_identity(1, 2, 2, 3, 2.0, 0.5, 1.0, 1.0, 0.8);
        let problem = DeepcProblem::new(part, config.clone()).unwrap();
        let eigs = problem.hessian().clone().symmetric_eigenvalues();
        let min_eig = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            min_eig >= 2.0 * config.lambda_g - 1e-9,
            "λmin = {min_eig}, expected ≥ {}",
            2.0 * config.lambda_g
        );
    }

    #[test]
    fn origin_is_optimal_for_zero_window_and_reference() {
        let part = random_partition(2, 1, 2, 3, 30, 5);
        let config = DeepcConfig::scaled_identity(2, 1, 2, 3, 10.0, 1.0, 5.0, 5.0, 1.0)
            .with_uniform_input_bounds(-1.0, 1.0);
        let problem = DeepcProblem::new(part, config).unwrap();
        let window = InitialWindow::zeros(2, 1, 2);
        let r = DVector::zeros(3);
        let sol = problem.solve(&window, &r, None).unwrap();
        assert!(sol.g.norm() < 1e-10, "‖g‖ = {}", sol.g.norm());
        assert!(sol.objective.abs() < 1e-12);
    }

    #[test]
    fn window_residuals_shrink_as_slack_weights_grow() {
        // Noiseless single-state linear plant: y(k+1) = 0.8·y(k) + u(k),
        // recorded under a rich input, tracked to a reachable constant.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut y_state = 0.0;
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for _ in 0..120 {
            let u = rng.random_range(-1.0..1.0);
            outputs.push(DVector::from_vec(vec![y_state]));
            inputs.push(DVector::from_vec(vec![u]));
            y_state = 0.8 * y_state + u;
        }
        let traj = IOTrajectory::new(inputs, outputs, 0.1).unwrap();
        let t_ini = 4;
        let n = 6;
        let part = build_mosaic_hankel(&[traj], t_ini, n).unwrap();

        // A window actually generated by the plant, ending at rest.
        let window = InitialWindow::new(
            vec![DVector::from_vec(vec![0.3]); t_ini],
            {
                let mut y = 0.5;
                (0..t_ini)
                    .map(|_| {
                        let out = DVector::from_vec(vec![y]);
                        y = 0.8 * y + 0.3;
                        out
                    })
                    .collect()
            },
        )
        .unwrap();
        let r = DVector::from_element(n, 1.2);

        let mut last = f64::INFINITY;
        for lambda in [1e3, 1e5, 1e7] {
            let config =
                DeepcConfig::scaled_identity(1, 1, t_ini, n, 50.0, 0.1, lambda, lambda, 1e-2);
            let problem = DeepcProblem::new(part.clone(), config).unwrap();
            let sol = problem.solve(&window, &r, None).unwrap();
            let slack = (sol.sigma_y.norm_squared() + sol.sigma_u.norm_squared()).sqrt();
            assert!(
                slack <= last + 1e-12,
                "slack {slack} did not shrink from {last} at λ = {lambda}"
            );
            last = slack;
        }
        assert!(last < 1e-6, "final slack {last} still large");
    }

    #[test]
    fn closed_form_gains_agree_with_the_solver() {
        let m = 2;
        let p = 1;
        let t_ini = 3;
        let n = 4;
        let part = random_partition(m, p, t_ini, n, 50, 7);
        let config = DeepcConfig::scaled_identity(m, p, t_ini, n, 8.0, 0.5, 30.0, 30.0, 0.4);
        let problem = DeepcProblem::new(part.clone(), config.clone()).unwrap();
        let gains = problem.unconstrained_gains().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let window = random_window(m, p, t_ini, &mut rng);
            let r = DVector::from_fn(p * n, |_, _| rng.random_range(-1.0..1.0));
            let sol = problem.solve(&window, &r, None).unwrap();
            let u_gain = &gains.reference_gain * &r + &gains.window_gain * window.stacked();
            assert!(
                (&sol.u - &u_gain).amax() <= 1e-9,
                "gain and solver inputs differ by {}",
                (&sol.u - &u_gain).amax()
            );
        }
    }

    #[test]
    fn zero_tracking_weight_kills_the_reference_gain() {
        let part = random_partition(1, 1, 2, 3, 30, 9);
        let config = DeepcConfig::scaled_identity(1, 1, 2, 3, 0.0, 1.0, 4.0, 4.0, 0.6);
        let gains = unconstrained_gains(&part, &config).unwrap();
        assert!(gains.reference_gain.amax() < 1e-14);
        assert!(gains.window_gain.amax() > 1e-6);
    }

    #[test]
    fn zero_slack_weights_kill_the_window_gain() {
        let part = random_partition(1, 1, 2, 3, 30, 10);
        let config = DeepcConfig::scaled_identity(1, 1, 2, 3, 5.0, 1.0, 0.0, 0.0, 0.6);
        let gains = unconstrained_gains(&part, &config).unwrap();
        assert!(gains.window_gain.amax() < 1e-14);
        assert!(gains.reference_gain.amax() > 1e-6);
    }

    #[test]
    fn bound_rows_count_and_label_as_documented() {
        let m = 1;
        let p = 2;
        let n = 3;
        let part = random_partition(m, p, 2, n, 30, 11);
        let bound = std::f64::consts::FRAC_PI_6;
        let config = DeepcConfig::scaled_identity(m, p, 2, n, 1.0, 1.0, 1.0, 1.0, 1.0)
            .with_uniform_input_bounds(-bound, bound);
        let rows = assemble_constraints(&part, &config).unwrap();
        assert_eq!(rows.len(), 2 * n);
        assert_eq!(rows.kinds[0], RowKind::InputUpper { step: 0, channel: 0 });
        assert_eq!(rows.kinds[n], RowKind::InputLower { step: 0, channel: 0 });
        assert!(rows.rhs.iter().all(|&b| (b - bound).abs() < 1e-15));
        // Upper row for step k is the matching future-input Hankel row.
        for step in 0..n {
            let expect = part.u_future().row(step).transpose();
            assert_eq!(rows.matrix.row(step).transpose(), expect);
            assert_eq!(rows.matrix.row(n + step).transpose(), -expect);
        }

        let unbounded = DeepcConfig::scaled_identity(m, p, 2, n, 1.0, 1.0, 1.0, 1.0, 1.0);
        assert!(assemble_constraints(&part, &unbounded).unwrap().is_empty());
    }

    #[test]
    fn halfspace_rows_combine_both_signal_blocks() {
        let m = 1;
        let p = 1;
        let n = 2;
        let part = random_partition(m, p, 2, n, 25, 12);
        let mut config = DeepcConfig::scaled_identity(m, p, 2, n, 1.0, 1.0, 1.0, 1.0, 1.0);
        let a_y = DVector::from_vec(vec![1.0, -2.0]);
        let a_u = DVector::from_vec(vec![0.5, 0.0]);
        config.extra_halfspaces.push(Halfspace {
            a_y: a_y.clone(),
            a_u: a_u.clone(),
            b: 3.0,
        });
        let rows = assemble_constraints(&part, &config).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows.kinds[0], RowKind::Halfspace { index: 0 });
        let expect = part.y_future().transpose() * &a_y + part.u_future().transpose() * &a_u;
        assert!((rows.matrix.row(0).transpose() - expect).amax() < 1e-14);
        assert_eq!(rows.rhs[0], 3.0);

        // A feasible solve's plan satisfies the halfspace.
        let problem = DeepcProblem::new(part, config).unwrap();
        let window = InitialWindow::zeros(m, p, 2);
        let r = DVector::from_element(p * n, 0.4);
        let sol = problem.solve(&window, &r, None).unwrap();
        assert!(a_y.dot(&sol.y) + a_u.dot(&sol.u) <= 3.0 + 1e-8);
    }

    #[test]
    fn window_shift_matches_sliding_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = 2;
        let p = 1;
        let t_ini = 4;
        let total = 9;
        let us: Vec<DVector<f64>> = (0..total)
            .map(|_| DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let ys: Vec<DVector<f64>> = (0..total)
            .map(|_| DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let mut window =
            InitialWindow::new(us[..t_ini].to_vec(), ys[..t_ini].to_vec()).unwrap();
        for k in t_ini..total {
            window.shift(us[k].clone(), ys[k].clone());
            let rebuilt =
                InitialWindow::new(us[k + 1 - t_ini..=k].to_vec(), ys[k + 1 - t_ini..=k].to_vec())
                    .unwrap();
            assert_eq!(window, rebuilt);
        }
    }

    #[test]
    fn dimension_errors_name_the_offending_block() {
        let part = random_partition(2, 1, 3, 4, 40, 14);
        let mut config = DeepcConfig::scaled_identity(2, 1, 3, 4, 1.0, 1.0, 1.0, 1.0, 1.0);
        config.q = DMatrix::identity(5, 5);
        match DeepcProblem::new(part.clone(), config) {
            Err(DeepcError::Dimension(msg)) => assert!(msg.contains("tracking weight Q")),
            other => panic!("expected a Q dimension error, got {other:?}"),
        }
        let mut config = DeepcConfig::scaled_identity(2, 1, 3, 4, 1.0, 1.0, 1.0, 1.0, 1.0);
        config.input_bounds = vec![None];
        match DeepcProblem::new(part.clone(), config) {
            Err(DeepcError::Dimension(msg)) => assert!(msg.contains("input_bounds")),
            other => panic!("expected a bounds dimension error, got {other:?}"),
        }
        let config = DeepcConfig::scaled_identity(2, 1, 3, 4, 1.0, 1.0, 1.0, 1.0, 0.0);
        match DeepcProblem::new(part, config) {
            Err(DeepcError::InvalidConfig(msg)) => assert!(msg.contains("lambda_g")),
            other => panic!("expected a lambda_g error, got {other:?}"),
        }
    }

    #[test]
    fn full_scale_assembly_has_documented_shape() {
        // The flagship experiment shape: 7 inputs, 7 outputs, window 35,
        // horizon 20 → 770 data rows; enough columns for L = 2300.
        let m = 7;
        let p = 7;
        let t_ini = 35;
        let n = 20;
        let depth = t_ini + n;
        let len = 2300 + depth - 1;
        let part = random_partition(m, p, t_ini, n, len, 15);
        assert_eq!(part.num_columns(), 2300);
        let row_total = (m + p) * depth;
        assert_eq!(row_total, 770);
        let config = DeepcConfig::scaled_identity(m, p, t_ini, n, 5e4, 1e2, 5e5, 5e5, 5e2);
        let window = InitialWindow::zeros(m, p, t_ini);
        let r = DVector::zeros(p * n);
        let cost = assemble_cost(&part, &config, &window, &r).unwrap();
        assert_eq!(cost.hessian.nrows(), 2300);
        assert_eq!(cost.hessian.ncols(), 2300);
        // Diagonal dominance from the regularizer floor.
        for i in 0..10 {
            assert!(cost.hessian[(i, i)] >= 2.0 * 5e2);
        }
    }
}
