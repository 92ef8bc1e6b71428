//! Input/output trajectory data and its Hankel-matrix representation.
//!
//! A block-Hankel matrix of depth `d` built from a length-`T` sequence of
//! channel vectors has one column per length-`d` window of the sequence,
//! so `T - d + 1` columns.  A mosaic Hankel matrix concatenates the
//! per-trajectory Hankel matrices column-wise: every column comes from a
//! single trajectory, windows never mix recordings.
//!
//! [`build_mosaic_hankel`] additionally splits the stacked input/output
//! Hankel rows into a past/future partition: the first `t_ini` block rows
//! pin the window onto the plant's current internal state, the remaining
//! `horizon` block rows span the predicted future.

mod io;

pub use io::{read_trajectory_csv, write_trajectory_csv, Dataset};

use nalgebra::{DMatrix, DVector};
use std::fmt;

/// Errors from trajectory validation and Hankel assembly.
#[derive(Debug)]
pub enum SignalError {
    /// A trajectory must contain at least one sample.
    Empty,
    /// Channel counts or sequence lengths disagree; the message names the
    /// offending piece.
    DimensionMismatch(String),
    /// A sequence is too short for the requested window depth.
    TooShort { required: usize, got: usize },
    /// Trajectory `index` is too short to contribute at least one strict
    /// window (`required` samples needed).
    TrajectoryTooShort {
        index: usize,
        required: usize,
        got: usize,
    },
    /// Sample period must be a positive finite number.
    BadSamplePeriod(f64),
    /// Underlying file I/O failure.
    Io(std::io::Error),
    /// Dataset JSON could not be parsed.
    Json(serde_json::Error),
    /// A trajectory CSV file was malformed at the given 1-based line.
    Csv { line: usize, message: String },
}

impl fmt::Display for SignalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalError::Empty => write!(f, "trajectory contains no samples"),
            SignalError::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            SignalError::TooShort { required, got } => write!(
                f,
                "sequence of length {got} is too short: depth requires at least {required} samples"
            ),
            SignalError::TrajectoryTooShort {
                index,
                required,
                got,
            } => write!(
                f,
                "trajectory {index} has {got} samples but at least {required} are required \
                 (window depth plus one; pass allow_single_window to accept exact-length records)"
            ),
            SignalError::BadSamplePeriod(v) => {
                write!(f, "sample period must be positive and finite, got {v}")
            }
            SignalError::Io(e) => write!(f, "i/o error: {e}"),
            SignalError::Json(e) => write!(f, "dataset JSON error: {e}"),
            SignalError::Csv { line, message } => {
                write!(f, "trajectory CSV error at line {line}: {message}")
            }
        }
    }
}

impl std::error::Error for SignalError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SignalError::Io(e) => Some(e),
            SignalError::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for SignalError {
    fn from(e: std::io::Error) -> Self {
        SignalError::Io(e)
    }
}

impl From<serde_json::Error> for SignalError {
    fn from(e: serde_json::Error) -> Self {
        SignalError::Json(e)
    }
}

/// One recorded input/output trajectory sampled at a fixed period.
///
/// `inputs[t]` and `outputs[t]` are the channel vectors at step `t`; the
/// two sequences have equal length and every sample has the same channel
/// count as the first.
#[derive(Debug, Clone, PartialEq)]
pub struct IOTrajectory {
    inputs: Vec<DVector<f64>>,
    outputs: Vec<DVector<f64>>,
    sample_period: f64,
}

impl IOTrajectory {
    /// Validates and wraps a recorded trajectory.
    pub fn new(
        inputs: Vec<DVector<f64>>,
        outputs: Vec<DVector<f64>>,
        sample_period: f64,
    ) -> Result<Self, SignalError> {
        if inputs.is_empty() || outputs.is_empty() {
            return Err(SignalError::Empty);
        }
        if inputs.len() != outputs.len() {
            return Err(SignalError::DimensionMismatch(format!(
                "{} input samples vs {} output samples",
                inputs.len(),
                outputs.len()
            )));
        }
        if !(sample_period.is_finite() && sample_period > 0.0) {
            return Err(SignalError::BadSamplePeriod(sample_period));
        }
        let m = inputs[0].len();
        let p = outputs[0].len();
        if m == 0 || p == 0 {
            return Err(SignalError::DimensionMismatch(
                "samples must have at least one channel".to_string(),
            ));
        }
        for (t, u) in inputs.iter().enumerate() {
            if u.len() != m {
                return Err(SignalError::DimensionMismatch(format!(
                    "input sample {t} has {} channels, expected {m}",
                    u.len()
                )));
            }
        }
        for (t, y) in outputs.iter().enumerate() {
            if y.len() != p {
                return Err(SignalError::DimensionMismatch(format!(
                    "output sample {t} has {} channels, expected {p}",
                    y.len()
                )));
            }
        }
        Ok(IOTrajectory {
            inputs,
            outputs,
            sample_period,
        })
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    /// True when the trajectory holds no samples (never, post-validation).
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Input channel count.
    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// Output channel count.
    pub fn output_dim(&self) -> usize {
        self.outputs[0].len()
    }

    /// Sampling period in seconds.
    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    /// Input samples, oldest first.
    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    /// Output samples, oldest first.
    pub fn outputs(&self) -> &[DVector<f64>] {
        &self.outputs
    }
}

/// Builds the depth-`depth` block-Hankel matrix of a channel-vector
/// sequence.
///
/// With `d` channels and `T` samples the result is `d * depth` rows by
/// `T - depth + 1` columns; entry `(i * d + c, j)` is channel `c` of
/// sample `i + j`, i.e. column `j` stacks the window starting at `j`.
pub fn build_hankel(samples: &[DVector<f64>], depth: usize) -> Result<DMatrix<f64>, SignalError> {
    if samples.is_empty() {
        return Err(SignalError::Empty);
    }
    if depth == 0 {
        return Err(SignalError::DimensionMismatch(
            "window depth must be at least 1".to_string(),
        ));
    }
    let d = samples[0].len();
    for (t, s) in samples.iter().enumerate() {
        if s.len() != d {
            return Err(SignalError::DimensionMismatch(format!(
                "sample {t} has {} channels, expected {d}",
                s.len()
            )));
        }
    }
    let t_len = samples.len();
    if t_len < depth {
        return Err(SignalError::TooShort {
            required: depth,
            got: t_len,
        });
    }
    let cols = t_len - depth + 1;
    Ok(DMatrix::from_fn(d * depth, cols, |row, j| {
        let i = row / d;
        let c = row % d;
        samples[i + j][c]
    }))
}

/// Past/future partition of a (mosaic) input/output Hankel matrix.
///
/// All four blocks share the same column count `L`; column `j` of the
/// stack `[U_P; U_F]` is a length-`t_ini + horizon` input window from a
/// single trajectory, and likewise for outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelPartition {
    u_past: DMatrix<f64>,
    y_past: DMatrix<f64>,
    u_future: DMatrix<f64>,
    y_future: DMatrix<f64>,
    input_dim: usize,
    output_dim: usize,
    t_ini: usize,
    horizon: usize,
}

impl HankelPartition {
    /// Past-input block, `m * t_ini` rows.
    pub fn u_past(&self) -> &DMatrix<f64> {
        &self.u_past
    }

    /// Past-output block, `p * t_ini` rows.
    pub fn y_past(&self) -> &DMatrix<f64> {
        &self.y_past
    }

    /// Future-input block, `m * horizon` rows.
    pub fn u_future(&self) -> &DMatrix<f64> {
        &self.u_future
    }

    /// Future-output block, `p * horizon` rows.
    pub fn y_future(&self) -> &DMatrix<f64> {
        &self.y_future
    }

    /// Input channel count `m`.
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Output channel count `p`.
    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Length of the initial window that pins the plant state.
    pub fn t_ini(&self) -> usize {
        self.t_ini
    }

    /// Prediction horizon length.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of Hankel columns `L` (the dimension of the combination
    /// vector `g`).
    pub fn num_columns(&self) -> usize {
        self.u_past.ncols()
    }

    /// Reassembles the full depth-`t_ini + horizon` input Hankel
    /// `[U_P; U_F]`.
    pub fn stacked_inputs(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(
            self.u_past.nrows() + self.u_future.nrows(),
            self.num_columns(),
        );
        out.rows_mut(0, self.u_past.nrows()).copy_from(&self.u_past);
        out.rows_mut(self.u_past.nrows(), self.u_future.nrows())
            .copy_from(&self.u_future);
        out
    }

    /// Reassembles the full depth-`t_ini + horizon` output Hankel
    /// `[Y_P; Y_F]`.
    pub fn stacked_outputs(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(
            self.y_past.nrows() + self.y_future.nrows(),
            self.num_columns(),
        );
        out.rows_mut(0, self.y_past.nrows()).copy_from(&self.y_past);
        out.rows_mut(self.y_past.nrows(), self.y_future.nrows())
            .copy_from(&self.y_future);
        out
    }
}

/// Builds the past/future mosaic Hankel partition of several trajectories.
///
/// Every trajectory must be strictly longer than `t_ini + horizon` so it
/// contributes at least two windows; see
/// [`build_mosaic_hankel_with`] to accept exact-length records (a single
/// window) as a deliberate boundary case.
pub fn build_mosaic_hankel(
    trajectories: &[IOTrajectory],
    t_ini: usize,
    horizon: usize,
) -> Result<HankelPartition, SignalError> {
    build_mosaic_hankel_with(trajectories, t_ini, horizon, false)
}

/// [`build_mosaic_hankel`] with an escape hatch: `allow_single_window`
/// accepts trajectories of length exactly `t_ini + horizon`, which yield a
/// single Hankel column each.
pub fn build_mosaic_hankel_with(
    trajectories: &[IOTrajectory],
    t_ini: usize,
    horizon: usize,
    allow_single_window: bool,
) -> Result<HankelPartition, SignalError> {
    if trajectories.is_empty() {
        return Err(SignalError::Empty);
    }
    if t_ini == 0 || horizon == 0 {
        return Err(SignalError::DimensionMismatch(
            "t_ini and horizon must both be at least 1".to_string(),
        ));
    }
    let depth = t_ini + horizon;
    let m = trajectories[0].input_dim();
    let p = trajectories[0].output_dim();
    let min_len = if allow_single_window { depth } else { depth + 1 };
    for (index, traj) in trajectories.iter().enumerate() {
        if traj.input_dim() != m || traj.output_dim() != p {
            return Err(SignalError::DimensionMismatch(format!(
                "trajectory {index} has {}/{} input/output channels, expected {m}/{p}",
                traj.input_dim(),
                traj.output_dim()
            )));
        }
        if traj.len() < min_len {
            return Err(SignalError::TrajectoryTooShort {
                index,
                required: min_len,
                got: traj.len(),
            });
        }
    }

    let mut input_blocks = Vec::with_capacity(trajectories.len());
    let mut output_blocks = Vec::with_capacity(trajectories.len());
    let mut total_cols = 0usize;
    for traj in trajectories {
        let hu = build_hankel(traj.inputs(), depth)?;
        let hy = build_hankel(traj.outputs(), depth)?;
        total_cols += hu.ncols();
        input_blocks.push(hu);
        output_blocks.push(hy);
    }

    let mut h_u = DMatrix::zeros(m * depth, total_cols);
    let mut h_y = DMatrix::zeros(p * depth, total_cols);
    let mut col = 0usize;
    for (hu, hy) in input_blocks.iter().zip(&output_blocks) {
        h_u.columns_mut(col, hu.ncols()).copy_from(hu);
        h_y.columns_mut(col, hy.ncols()).copy_from(hy);
        col += hu.ncols();
    }

    Ok(HankelPartition {
        u_past: h_u.rows(0, m * t_ini).into_owned(),
        u_future: h_u.rows(m * t_ini, m * horizon).into_owned(),
        y_past: h_y.rows(0, p * t_ini).into_owned(),
        y_future: h_y.rows(p * t_ini, p * horizon).into_owned(),
        input_dim: m,
        output_dim: p,
        t_ini,
        horizon,
    })
}

/// Result of a persistency-of-excitation check.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistencyReport {
    /// True when the depth-`order` input Hankel has full row rank.
    pub persistent: bool,
    /// Numerical rank actually achieved.
    pub rank: usize,
    /// Full row rank `m * order` required for persistency.
    pub required_rank: usize,
    /// Absolute singular-value threshold used (`1e-10` times the largest
    /// singular value).
    pub tolerance: f64,
}

/// Relative singular-value cutoff for rank decisions.
const RANK_RTOL: f64 = 1e-10;

/// Checks persistency of excitation of an input sequence at a given order.
///
/// The sequence is persistently exciting of order `order` when its
/// depth-`order` Hankel matrix has full row rank; rank is counted as the
/// number of singular values above `1e-10` times the largest.
pub fn check_persistency(
    inputs: &[DVector<f64>],
    order: usize,
) -> Result<PersistencyReport, SignalError> {
    let hankel = build_hankel(inputs, order)?;
    let required_rank = hankel.nrows();
    let (rank, tolerance) = svd_rank(&hankel, RANK_RTOL);
    Ok(PersistencyReport {
        persistent: rank == required_rank,
        rank,
        required_rank,
        tolerance,
    })
}

/// Numerical rank via singular values: count above `rtol * sigma_max`.
/// Returns the rank and the absolute threshold used.
pub(crate) fn svd_rank(matrix: &DMatrix<f64>, rtol: f64) -> (usize, f64) {
    let svd = matrix.clone().svd(false, false);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = rtol * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    (rank, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn scalar_samples(values: &[f64]) -> Vec<DVector<f64>> {
        values.iter().map(|&v| DVector::from_vec(vec![v])).collect()
    }

    fn random_trajectory(seed: u64, m: usize, p: usize, len: usize) -> IOTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..len)
            .map(|_| DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let outputs = (0..len)
            .map(|_| DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        IOTrajectory::new(inputs, outputs, 0.1).unwrap()
    }

    #[test]
    fn hankel_of_scalar_ramp_depth_two() {
        let h = build_hankel(&scalar_samples(&[1.0, 2.0, 3.0, 4.0, 5.0]), 2).unwrap();
        let expected = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 3.0, 4.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(h, expected);
    }

    #[test]
    fn hankel_depth_equal_to_length_is_single_column() {
        let h = build_hankel(&scalar_samples(&[7.0, 8.0, 9.0]), 3).unwrap();
        assert_eq!(h.ncols(), 1);
        assert_eq!(h.nrows(), 3);
        assert_eq!(h.column(0).as_slice(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn hankel_depth_longer_than_sequence_is_rejected() {
        let err = build_hankel(&scalar_samples(&[1.0, 2.0]), 3).unwrap_err();
        match err {
            SignalError::TooShort { required, got } => {
                assert_eq!(required, 3);
                assert_eq!(got, 2);
            }
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    proptest! {
        // Structural definition of the block-Hankel layout: entry
        // (i*d + c, j) must equal channel c of sample i + j.
        #[test]
        fn hankel_entries_index_windows(
            seed in 0u64..1000,
            d in 1usize..4,
            len in 4usize..12,
            depth in 1usize..4,
        ) {
            prop_assume!(depth <= len);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<DVector<f64>> = (0..len)
                .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0)))
                .collect();
            let h = build_hankel(&samples, depth).unwrap();
            prop_assert_eq!(h.ncols(), len - depth + 1);
            for i in 0..depth {
                for c in 0..d {
                    for j in 0..h.ncols() {
                        prop_assert_eq!(h[(i * d + c, j)], samples[i + j][c]);
                    }
                }
            }
        }
    }

    // Enumeration oracle: the number of mosaic columns equals the number
    // of valid window start offsets summed over trajectories.
    fn count_windows(lengths: &[usize], depth: usize) -> usize {
        lengths
            .iter()
            .map(|&t| if t >= depth { t - depth + 1 } else { 0 })
            .sum()
    }

    #[test]
    fn mosaic_column_count_matches_window_enumeration() {
        let t_ini = 35;
        let horizon = 20;
        let trajs = vec![
            random_trajectory(1, 2, 3, 60),
            random_trajectory(2, 2, 3, 70),
        ];
        let part = build_mosaic_hankel(&trajs, t_ini, horizon).unwrap();
        assert_eq!(part.num_columns(), count_windows(&[60, 70], 55));
        assert_eq!(part.num_columns(), 22);
        assert_eq!(part.u_past().nrows(), 2 * t_ini);
        assert_eq!(part.y_past().nrows(), 3 * t_ini);
        assert_eq!(part.u_future().nrows(), 2 * horizon);
        assert_eq!(part.y_future().nrows(), 3 * horizon);
    }

    #[test]
    fn mosaic_columns_never_mix_trajectories() {
        // Tag each trajectory with a distinct constant input channel; every
        // column of the stacked input Hankel must then be constant in that
        // channel.
        let mk = |tag: f64, len: usize| {
            let inputs = (0..len)
                .map(|t| DVector::from_vec(vec![tag, t as f64]))
                .collect();
            let outputs = (0..len).map(|_| DVector::from_vec(vec![0.0])).collect();
            IOTrajectory::new(inputs, outputs, 1.0).unwrap()
        };
        let trajs = vec![mk(1.0, 8), mk(2.0, 9)];
        let part = build_mosaic_hankel(&trajs, 2, 3).unwrap();
        let stacked = part.stacked_inputs();
        for j in 0..stacked.ncols() {
            let tag = stacked[(0, j)];
            for i in 0..5 {
                assert_eq!(stacked[(2 * i, j)], tag, "column {j} mixes trajectories");
            }
        }
        // 8-5+1 + 9-5+1 columns.
        assert_eq!(stacked.ncols(), 4 + 5);
    }

    #[test]
    fn mosaic_of_single_trajectory_is_plain_hankel() {
        let traj = random_trajectory(3, 2, 2, 20);
        let part = build_mosaic_hankel(std::slice::from_ref(&traj), 4, 5).unwrap();
        let h_u = build_hankel(traj.inputs(), 9).unwrap();
        let h_y = build_hankel(traj.outputs(), 9).unwrap();
        assert_eq!(part.stacked_inputs(), h_u);
        assert_eq!(part.stacked_outputs(), h_y);
    }

    #[test]
    fn mosaic_rejects_exact_length_trajectory_by_default() {
        let trajs = vec![random_trajectory(4, 1, 1, 12), random_trajectory(5, 1, 1, 8)];
        let err = build_mosaic_hankel(&trajs, 3, 5).unwrap_err();
        match err {
            SignalError::TrajectoryTooShort {
                index,
                required,
                got,
            } => {
                assert_eq!(index, 1);
                assert_eq!(required, 9);
                assert_eq!(got, 8);
            }
            other => panic!("expected TrajectoryTooShort, got {other:?}"),
        }
    }

    #[test]
    fn mosaic_accepts_single_window_when_allowed() {
        let trajs = vec![random_trajectory(6, 1, 1, 8)];
        let part = build_mosaic_hankel_with(&trajs, 3, 5, true).unwrap();
        assert_eq!(part.num_columns(), 1);
        // The single column is the whole record.
        let u: Vec<f64> = part.stacked_inputs().column(0).iter().cloned().collect();
        let expect: Vec<f64> = trajs[0].inputs().iter().map(|v| v[0]).collect();
        assert_abs_diff_eq!(u.as_slice(), expect.as_slice(), epsilon = 0.0);
    }

    #[test]
    fn random_input_is_persistently_exciting() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs: Vec<DVector<f64>> = (0..200)
            .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let order = 10;
        let report = check_persistency(&inputs, order).unwrap();
        assert!(report.persistent);
        assert_eq!(report.rank, 2 * order);
        assert_eq!(report.required_rank, 2 * order);

        // Independent rank oracle: count non-negligible diagonal entries of
        // R in a column-pivoted QR of the same Hankel (pivoting sorts the
        // diagonal by magnitude, so this counts the numerical rank).
        let h = build_hankel(&inputs, order).unwrap();
        let qr = h.col_piv_qr();
        let r = qr.r();
        let r_diag: Vec<f64> = (0..r.nrows().min(r.ncols()))
            .map(|i| r[(i, i)].abs())
            .collect();
        let r_diag_max = r_diag.iter().cloned().fold(0.0f64, f64::max);
        let qr_rank = r_diag.iter().filter(|&&v| v > 1e-10 * r_diag_max).count();
        assert_eq!(qr_rank, report.rank);
    }

    #[test]
    fn pure_sinusoid_fails_persistency_at_order_four() {
        // A single sinusoid spans a two-dimensional signal subspace, so any
        // depth-4 Hankel of it has rank exactly 2.
        let inputs: Vec<DVector<f64>> = (0..120)
            .map(|t| DVector::from_vec(vec![(0.37 * t as f64).sin()]))
            .collect();
        let report = check_persistency(&inputs, 4).unwrap();
        assert!(!report.persistent);
        assert_eq!(report.rank, 2);
        assert_eq!(report.required_rank, 4);
    }

    #[test]
    fn constant_input_is_order_one_persistent_only() {
        let inputs: Vec<DVector<f64>> = (0..30).map(|_| DVector::from_vec(vec![1.5])).collect();
        let order_one = check_persistency(&inputs, 1).unwrap();
        assert!(order_one.persistent);
        let order_two = check_persistency(&inputs, 2).unwrap();
        assert!(!order_two.persistent);
        assert_eq!(order_two.rank, 1);
    }

    #[test]
    fn trajectory_validation_catches_mismatches() {
        let u = vec![DVector::from_vec(vec![1.0, 2.0])];
        let y = vec![DVector::from_vec(vec![1.0])];
        assert!(IOTrajectory::new(u.clone(), y.clone(), 0.1).is_ok());
        assert!(matches!(
            IOTrajectory::new(u.clone(), vec![], 0.1),
            Err(SignalError::Empty)
        ));
        assert!(matches!(
            IOTrajectory::new(u.clone(), y.clone(), 0.0),
            Err(SignalError::BadSamplePeriod(_))
        ));
        let ragged = vec![
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![1.0]),
        ];
        let y2 = vec![
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.0]),
        ];
        assert!(matches!(
            IOTrajectory::new(ragged, y2, 0.1),
            Err(SignalError::DimensionMismatch(_))
        ));
    }
}
