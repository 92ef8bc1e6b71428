//! Simulated plants, reference generators and keep-out geometry.
//!
//! Two plants cover the validation needs: a discrete linear state-space
//! system (exactness oracles — its recorded data spans every trajectory it
//! can produce) and a planar kinematic arm with joint-velocity inputs and
//! end-effector pose outputs (the redundant, velocity-controlled,
//! pose-tracking structure the controller is aimed at).  References are
//! sinusoids, constant-speed polylines or setpoints; axis-aligned
//! keep-out boxes are relaxed to a fixed separating face so the tracking
//! problem stays convex.

use crate::deepc::Halfspace;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use std::fmt;

/// Errors from plant construction and keep-out geometry.
#[derive(Debug)]
pub enum PlantError {
    Dimension(String),
    InvalidGeometry(String),
}

impl fmt::Display for PlantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlantError::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            PlantError::InvalidGeometry(msg) => write!(f, "invalid geometry: {msg}"),
        }
    }
}

impl std::error::Error for PlantError {}

/// A discrete-time simulator driven one sample at a time.
pub trait Plant {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Applies one input sample and returns the measured output.
    fn step(&mut self, u: &DVector<f64>) -> DVector<f64>;
}

/// Linear state-space plant
/// `x(k+1) = A·x(k) + B·u(k)`, `y(k) = C·x(k) + D·u(k)`.
///
/// [`Plant::step`] measures first and advances second: it returns
/// `y(k) = C·x(k) + D·u(k)` (plus configured noise) computed from the
/// pre-step state, then updates the state.
#[derive(Debug, Clone)]
pub struct LtiPlant {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    state: DVector<f64>,
    noise_std: Vec<f64>,
    rng: ChaCha8Rng,
}

impl LtiPlant {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
    ) -> Result<Self, PlantError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(PlantError::Dimension(format!(
                "state matrix A is {}×{}, expected square",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n {
            return Err(PlantError::Dimension(format!(
                "input matrix B has {} rows, state dimension is {n}",
                b.nrows()
            )));
        }
        if c.ncols() != n {
            return Err(PlantError::Dimension(format!(
                "output matrix C has {} columns, state dimension is {n}",
                c.ncols()
            )));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(PlantError::Dimension(format!(
                "feedthrough D is {}×{}, expected {}×{}",
                d.nrows(),
                d.ncols(),
                c.nrows(),
                b.ncols()
            )));
        }
        let p = c.nrows();
        Ok(LtiPlant {
            state: DVector::zeros(n),
            noise_std: vec![0.0; p],
            rng: ChaCha8Rng::seed_from_u64(0),
            a,
            b,
            c,
            d,
        })
    }

    /// A random internally-stable plant (spectral radius scaled to 0.8).
    pub fn random_stable(n: usize, m: usize, p: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let radius = a
            .clone()
            .complex_eigenvalues()
            .iter()
            .map(|e| e.norm())
            .fold(0.0f64, f64::max);
        if radius > 0.0 {
            a *= 0.8 / radius;
        }
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
        let d = DMatrix::zeros(p, m);
        LtiPlant::new(a, b, c, d).expect("generated dimensions are consistent")
    }

    /// Adds i.i.d. Gaussian measurement noise with the given per-channel
    /// standard deviations, drawn from a stream seeded here.
    pub fn with_noise(mut self, noise_std: Vec<f64>, seed: u64) -> Result<Self, PlantError> {
        if noise_std.len() != self.c.nrows() {
            return Err(PlantError::Dimension(format!(
                "{} noise channels, plant has {} outputs",
                noise_std.len(),
                self.c.nrows()
            )));
        }
        self.noise_std = noise_std;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self)
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }

    pub fn set_state(&mut self, state: DVector<f64>) -> Result<(), PlantError> {
        if state.len() != self.a.nrows() {
            return Err(PlantError::Dimension(format!(
                "state has length {}, plant dimension is {}",
                state.len(),
                self.a.nrows()
            )));
        }
        self.state = state;
        Ok(())
    }
}

fn add_noise(y: &mut DVector<f64>, noise_std: &[f64], rng: &mut ChaCha8Rng) {
    for (c, &std) in noise_std.iter().enumerate() {
        if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("finite std");
            y[c] += rng.sample(dist);
        }
    }
}

impl Plant for LtiPlant {
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    fn step(&mut self, u: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(u.len(), self.input_dim());
        let mut y = &self.c * &self.state + &self.d * u;
        add_noise(&mut y, &self.noise_std, &mut self.rng);
        self.state = &self.a * &self.state + &self.b * u;
        y
    }
}

/// Planar kinematic chain: joint-velocity inputs, end-effector pose
/// output `(x, y, heading)`.
///
/// Integrator semantics `θ(k+1) = θ(k) + T_s·u(k)` with the commanded
/// rates clipped to the declared limits (clipping is counted, not fatal).
/// [`Plant::step`] advances first and measures second: it returns the
/// pose reached after applying `u`, so recorded `(u, y)` pairs make the
/// current input visible in the current output.
#[derive(Debug, Clone)]
pub struct PlanarArm {
    link_lengths: Vec<f64>,
    joint_angles: DVector<f64>,
    sample_period: f64,
    rate_limits: (f64, f64),
    noise_std: Vec<f64>,
    rng: ChaCha8Rng,
    saturation_count: usize,
}

impl PlanarArm {
    pub fn new(
        link_lengths: Vec<f64>,
        sample_period: f64,
        rate_limits: (f64, f64),
    ) -> Result<Self, PlantError> {
        if link_lengths.is_empty() || link_lengths.iter().any(|&l| l <= 0.0 || l.is_nan()) {
            return Err(PlantError::InvalidGeometry(
                "link lengths must be positive and nonempty".into(),
            ));
        }
        if sample_period <= 0.0 || sample_period.is_nan() {
            return Err(PlantError::InvalidGeometry(format!(
                "sample period must be positive (got {sample_period})"
            )));
        }
        if rate_limits.0 > rate_limits.1 || rate_limits.0.is_nan() || rate_limits.1.is_nan() {
            return Err(PlantError::InvalidGeometry(format!(
                "rate limits [{}, {}] have lo > hi",
                rate_limits.0, rate_limits.1
            )));
        }
        let n = link_lengths.len();
        Ok(PlanarArm {
            link_lengths,
            joint_angles: DVector::zeros(n),
            sample_period,
            rate_limits,
            noise_std: vec![0.0; 3],
            rng: ChaCha8Rng::seed_from_u64(0),
            saturation_count: 0,
        })
    }

    /// Adds Gaussian measurement noise on the pose channels.
    pub fn with_noise(mut self, noise_std: Vec<f64>, seed: u64) -> Result<Self, PlantError> {
        if noise_std.len() != 3 {
            return Err(PlantError::Dimension(format!(
                "{} noise channels, pose output has 3",
                noise_std.len()
            )));
        }
        self.noise_std = noise_std;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self)
    }

    pub fn joint_angles(&self) -> &DVector<f64> {
        &self.joint_angles
    }

    pub fn set_joint_angles(&mut self, angles: DVector<f64>) -> Result<(), PlantError> {
        if angles.len() != self.link_lengths.len() {
            return Err(PlantError::Dimension(format!(
                "{} joint angles, arm has {} joints",
                angles.len(),
                self.link_lengths.len()
            )));
        }
        self.joint_angles = angles;
        Ok(())
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    /// Number of steps on which at least one channel hit a rate limit.
    pub fn saturation_count(&self) -> usize {
        self.saturation_count
    }

    /// Noise-free pose at the current configuration.
    pub fn pose(&self) -> DVector<f64> {
        forward_kinematics(&self.link_lengths, &self.joint_angles)
    }

    /// Total reach (sum of link lengths) — the workspace radius.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }
}

/// Planar forward kinematics: position is the sum of link vectors at the
/// partial-sum angles, heading is the total angle.
pub fn forward_kinematics(link_lengths: &[f64], joint_angles: &DVector<f64>) -> DVector<f64> {
    debug_assert_eq!(link_lengths.len(), joint_angles.len());
    let mut x = 0.0;
    let mut y = 0.0;
    let mut phi = 0.0;
    for (l, theta) in link_lengths.iter().zip(joint_angles.iter()) {
        phi += theta;
        x += l * phi.cos();
        y += l * phi.sin();
    }
    DVector::from_vec(vec![x, y, phi])
}

impl Plant for PlanarArm {
    fn input_dim(&self) -> usize {
        self.link_lengths.len()
    }

    fn output_dim(&self) -> usize {
        3
    }

    fn step(&mut self, u: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(u.len(), self.input_dim());
        let (lo, hi) = self.rate_limits;
        let mut clipped = false;
        for (j, &rate) in u.iter().enumerate() {
            let bounded = rate.clamp(lo, hi);
            if bounded != rate {
                clipped = true;
            }
            self.joint_angles[j] += self.sample_period * bounded;
        }
        if clipped {
            self.saturation_count += 1;
        }
        let mut y = self.pose();
        add_noise(&mut y, &self.noise_std, &mut self.rng);
        y
    }
}

/// How a reference sequence was generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    Sinusoid,
    Polyline,
    Setpoint,
}

/// Per-channel sinusoid parameters: `offset + amplitude·sin(2π·k/period + phase)`.
#[derive(Debug, Clone, Copy)]
pub struct SinusoidSpec {
    pub amplitude: f64,
    /// Period in samples (must be positive).
    pub period_samples: f64,
    pub phase: f64,
    pub offset: f64,
}

/// A precomputed reference sequence for the controller to track.
#[derive(Debug, Clone)]
pub struct ReferenceTrack {
    points: Vec<DVector<f64>>,
    kind: ReferenceKind,
}

impl ReferenceTrack {
    /// Sinusoidal reference, one spec per output channel.
    pub fn sinusoid(specs: &[SinusoidSpec], length: usize) -> Result<Self, PlantError> {
        if specs.is_empty() || length == 0 {
            return Err(PlantError::InvalidGeometry(
                "sinusoid needs at least one channel and one sample".into(),
            ));
        }
        if let Some(bad) = specs.iter().find(|s| s.period_samples <= 0.0 || s.period_samples.is_nan()) {
            return Err(PlantError::InvalidGeometry(format!(
                "sinusoid period must be positive (got {})",
                bad.period_samples
            )));
        }
        let points = (0..length)
            .map(|k| {
                DVector::from_fn(specs.len(), |c, _| {
                    let s = &specs[c];
                    s.offset
                        + s.amplitude
                            * (2.0 * std::f64::consts::PI * k as f64 / s.period_samples + s.phase)
                                .sin()
                })
            })
            .collect();
        Ok(ReferenceTrack {
            points,
            kind: ReferenceKind::Sinusoid,
        })
    }

    /// Piecewise-linear path through `waypoints`, sampled at constant
    /// arc-length rate; the first and last samples are the exact
    /// endpoints.
    pub fn polyline(waypoints: &[DVector<f64>], length: usize) -> Result<Self, PlantError> {
        if waypoints.is_empty() || length == 0 {
            return Err(PlantError::InvalidGeometry(
                "polyline needs at least one waypoint and one sample".into(),
            ));
        }
        let dim = waypoints[0].len();
        if waypoints.iter().any(|w| w.len() != dim) {
            return Err(PlantError::Dimension(
                "polyline waypoints have inconsistent dimensions".into(),
            ));
        }
        let seg_lengths: Vec<f64> = waypoints
            .windows(2)
            .map(|pair| (&pair[1] - &pair[0]).norm())
            .collect();
        let total: f64 = seg_lengths.iter().sum();
        let mut points = Vec::with_capacity(length);
        if total == 0.0 || length == 1 {
            for _ in 0..length {
                points.push(waypoints[0].clone());
            }
        } else {
            for k in 0..length {
                let mut s = total * k as f64 / (length - 1) as f64;
                let mut idx = 0;
                while idx < seg_lengths.len() && s > seg_lengths[idx] {
                    s -= seg_lengths[idx];
                    idx += 1;
                }
                if idx == seg_lengths.len() {
                    points.push(waypoints[waypoints.len() - 1].clone());
                } else if seg_lengths[idx] == 0.0 {
                    points.push(waypoints[idx].clone());
                } else {
                    let t = s / seg_lengths[idx];
                    points.push(&waypoints[idx] * (1.0 - t) + &waypoints[idx + 1] * t);
                }
            }
        }
        Ok(ReferenceTrack {
            points,
            kind: ReferenceKind::Polyline,
        })
    }

    /// Constant reference.
    pub fn setpoint(value: DVector<f64>, length: usize) -> Result<Self, PlantError> {
        if value.is_empty() || length == 0 {
            return Err(PlantError::InvalidGeometry(
                "setpoint needs at least one channel and one sample".into(),
            ));
        }
        Ok(ReferenceTrack {
            points: vec![value; length],
            kind: ReferenceKind::Setpoint,
        })
    }

    pub fn kind(&self) -> ReferenceKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.points[0].len()
    }

    pub fn point(&self, k: usize) -> &DVector<f64> {
        &self.points[k.min(self.points.len() - 1)]
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    /// The stacked reference for horizon steps `k … k+n−1`, holding the
    /// final point past the end of the track.
    pub fn window(&self, k: usize, n: usize) -> DVector<f64> {
        let p = self.channels();
        DVector::from_fn(p * n, |i, _| {
            let step = i / p;
            let channel = i % p;
            self.point(k + step)[channel]
        })
    }
}

/// An axis-aligned keep-out box on a subset of output channels.
#[derive(Debug, Clone)]
pub struct UnsafeBox {
    /// Output channels the box constrains (distinct, ascending).
    pub channels: Vec<usize>,
    /// Lower corner, one value per entry of `channels`.
    pub lo: DVector<f64>,
    /// Upper corner, one value per entry of `channels`.
    pub hi: DVector<f64>,
}

impl UnsafeBox {
    pub fn new(channels: Vec<usize>, lo: DVector<f64>, hi: DVector<f64>) -> Result<Self, PlantError> {
        if channels.is_empty() || channels.len() != lo.len() || channels.len() != hi.len() {
            return Err(PlantError::Dimension(format!(
                "box has {} channels but corners of length {} and {}",
                channels.len(),
                lo.len(),
                hi.len()
            )));
        }
        let mut sorted = channels.clone();
        sorted.dedup();
        if sorted.len() != channels.len() || channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PlantError::InvalidGeometry(
                "box channels must be distinct and ascending".into(),
            ));
        }
        for i in 0..channels.len() {
            if lo[i] >= hi[i] || lo[i].is_nan() || hi[i].is_nan() {
                return Err(PlantError::InvalidGeometry(format!(
                    "box is degenerate on channel {}: [{}, {}] has no volume",
                    channels[i], lo[i], hi[i]
                )));
            }
        }
        Ok(UnsafeBox { channels, lo, hi })
    }

    /// True when the point (restricted to the box channels) lies strictly
    /// inside the box.
    pub fn contains(&self, y: &DVector<f64>) -> bool {
        self.channels
            .iter()
            .enumerate()
            .all(|(i, &c)| y[c] > self.lo[i] && y[c] < self.hi[i])
    }
}

/// One fixed face of a keep-out box, used as a convex stand-in for the
/// stay-outside disjunction: every point satisfying the face constraint
/// is outside the box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparatingFace {
    /// The output channel the face bounds.
    pub output_channel: usize,
    /// `true`: stay below the box (`y ≤ bound` with `bound = lo`);
    /// `false`: stay above it (`y ≥ bound` with `bound = hi`).
    pub keep_below: bool,
    pub bound: f64,
}

impl SeparatingFace {
    /// Signed violation of the face constraint at an output point
    /// (positive = violated).
    pub fn violation(&self, y: &DVector<f64>) -> f64 {
        if self.keep_below {
            y[self.output_channel] - self.bound
        } else {
            self.bound - y[self.output_channel]
        }
    }

    pub fn satisfied(&self, y: &DVector<f64>, tol: f64) -> bool {
        self.violation(y) <= tol
    }

    /// The face as per-step halfspace rows over the stacked predicted
    /// signals, optionally tightened by a safety margin (the margin moves
    /// the constraint boundary away from the box).  The rows touch only
    /// output coordinates; the input block is zero.
    pub fn halfspaces(
        &self,
        input_dim: usize,
        output_dim: usize,
        horizon: usize,
        margin: f64,
    ) -> Vec<Halfspace> {
        (0..horizon)
            .map(|step| {
                let mut a_y = DVector::zeros(output_dim * horizon);
                let (coeff, b) = if self.keep_below {
                    (1.0, self.bound - margin)
                } else {
                    (-1.0, -(self.bound + margin))
                };
                a_y[step * output_dim + self.output_channel] = coeff;
                Halfspace {
                    a_y,
                    a_u: DVector::zeros(input_dim * horizon),
                    b,
                }
            })
            .collect()
    }
}

/// Picks the box face the reference already satisfies best: the one with
/// the smallest total hinge violation `Σ_k max(0, violation at r(k))`.
/// Ties resolve to the earlier channel, lower face first.
pub fn choose_separating_face(keep_out: &UnsafeBox, reference: &[DVector<f64>]) -> SeparatingFace {
    let mut best: Option<(SeparatingFace, f64)> = None;
    for (i, &channel) in keep_out.channels.iter().enumerate() {
        for keep_below in [true, false] {
            let face = SeparatingFace {
                output_channel: channel,
                keep_below,
                bound: if keep_below { keep_out.lo[i] } else { keep_out.hi[i] },
            };
            let total: f64 = reference
                .iter()
                .map(|r| face.violation(r).max(0.0))
                .sum();
            match &best {
                Some((_, t)) if *t <= total => {}
                _ => best = Some((face, total)),
            }
        }
    }
    best.expect("box has at least one channel").0
}

/// Relaxes a keep-out box to per-step halfspace rows for the constraint
/// assembler: chooses the separating face nearest the reference, then
/// emits one row per horizon step (`horizon` rows total).  `margin`
/// tightens the rows so noise and prediction error cannot push the plant
/// across the face.
pub fn unsafe_box_constraint(
    keep_out: &UnsafeBox,
    reference: &[DVector<f64>],
    input_dim: usize,
    output_dim: usize,
    horizon: usize,
    margin: f64,
) -> Result<(SeparatingFace, Vec<Halfspace>), PlantError> {
    if let Some(&c) = keep_out.channels.iter().find(|&&c| c >= output_dim) {
        return Err(PlantError::Dimension(format!(
            "box channel {c} out of range for {output_dim} outputs"
        )));
    }
    let face = choose_separating_face(keep_out, reference);
    let rows = face.halfspaces(input_dim, output_dim, horizon, margin);
    Ok((face, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn scalar_lti_one_step_recursion() {
        let mut plant = LtiPlant::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let y0 = plant.step(&DVector::from_element(1, 1.0));
        let y1 = plant.step(&DVector::zeros(1));
        assert_abs_diff_eq!(y0[0], 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(y1[0], 1.0, epsilon = 0.0);
        // One more zero-input step decays by A.
        let y2 = plant.step(&DVector::zeros(1));
        assert_abs_diff_eq!(y2[0], 0.5, epsilon = 0.0);
    }

    #[test]
    fn identical_seeds_reproduce_identical_noisy_traces() {
        let run = || {
            let mut plant = LtiPlant::random_stable(3, 2, 2, 42)
                .with_noise(vec![1e-3, 1e-3], 7)
                .unwrap();
            let mut out = Vec::new();
            for k in 0..50 {
                let u = DVector::from_fn(2, |i, _| ((k + i) as f64 * 0.3).sin());
                out.push(plant.step(&u));
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn random_stable_spectral_radius_is_bounded() {
        for seed in 0..5 {
            let plant = LtiPlant::random_stable(4, 2, 2, seed);
            let radius = plant
                .a
                .clone()
                .complex_eigenvalues()
                .iter()
                .map(|e| e.norm())
                .fold(0.0f64, f64::max);
            assert!(radius < 0.8 + 1e-9, "seed {seed}: radius {radius}");
        }
    }

    #[test]
    fn stretched_two_link_arm_reaches_two_zero() {
        let arm = PlanarArm::new(vec![1.0, 1.0], 0.1, (-1.0, 1.0)).unwrap();
        let pose = arm.pose();
        assert_abs_diff_eq!(pose[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pose[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pose[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn first_joint_quarter_turn_points_straight_up() {
        let mut arm = PlanarArm::new(vec![1.0, 1.0], 0.1, (-10.0, 10.0)).unwrap();
        arm.set_joint_angles(DVector::from_vec(vec![FRAC_PI_2, 0.0])).unwrap();
        let pose = arm.pose();
        assert_abs_diff_eq!(pose[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pose[1], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pose[2], FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn kinematics_match_rotation_matrix_composition() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(1..6usize);
            let lengths: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.5)).collect();
            let angles = DVector::from_fn(n, |_, _| rng.random_range(-PI..PI));
            let fast = forward_kinematics(&lengths, &angles);

            // Independent evaluation: chain planar rotation matrices.
            let mut rot = nalgebra::Matrix2::identity();
            let mut pos = nalgebra::Vector2::zeros();
            for (l, theta) in lengths.iter().zip(angles.iter()) {
                let r = nalgebra::Matrix2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos());
                rot *= r;
                pos += rot * nalgebra::Vector2::new(*l, 0.0);
            }
            assert_abs_diff_eq!(fast[0], pos[0], epsilon = 1e-12);
            assert_abs_diff_eq!(fast[1], pos[1], epsilon = 1e-12);
            assert_abs_diff_eq!(fast[2], angles.sum(), epsilon = 1e-12);
        }
    }

    #[test]
    fn rate_limits_clip_and_count() {
        let mut arm = PlanarArm::new(vec![1.0], 0.5, (-1.0, 1.0)).unwrap();
        let y = arm.step(&DVector::from_vec(vec![4.0]));
        assert_eq!(arm.saturation_count(), 1);
        // Clipped to 1.0 rad/s for 0.5 s → 0.5 rad.
        assert_abs_diff_eq!(arm.joint_angles()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(y[2], 0.5, epsilon = 1e-15);
        arm.step(&DVector::from_vec(vec![0.5]));
        assert_eq!(arm.saturation_count(), 1);
    }

    #[test]
    fn sinusoid_track_has_requested_length_and_shape() {
        let specs = [
            SinusoidSpec { amplitude: 0.5, period_samples: 100.0, phase: 0.0, offset: 0.2 },
            SinusoidSpec { amplitude: 0.3, period_samples: 50.0, phase: 1.0, offset: -0.1 },
        ];
        let track = ReferenceTrack::sinusoid(&specs, 300).unwrap();
        assert_eq!(track.len(), 300);
        assert_eq!(track.channels(), 2);
        assert_eq!(track.kind(), ReferenceKind::Sinusoid);
        assert_abs_diff_eq!(track.point(0)[0], 0.2, epsilon = 1e-15);
        // Quarter period of channel 0 hits offset + amplitude.
        assert_abs_diff_eq!(track.point(25)[0], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn polyline_endpoints_exact_and_speed_constant() {
        let a = DVector::from_vec(vec![0.0, 0.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let c = DVector::from_vec(vec![1.0, 2.0]);
        let track = ReferenceTrack::polyline(&[a.clone(), b, c.clone()], 100).unwrap();
        assert_eq!(track.len(), 100);
        assert!((track.point(0) - &a).norm() < 1e-15);
        assert!((track.point(99) - &c).norm() < 1e-12);
        // Constant arc-length rate: consecutive distances all equal.
        let step0 = (track.point(1) - track.point(0)).norm();
        for k in 1..99 {
            let step = (track.point(k + 1) - track.point(k)).norm();
            assert_abs_diff_eq!(step, step0, epsilon = 1e-9);
        }
    }

    #[test]
    fn setpoint_track_is_constant_and_window_pads() {
        let value = DVector::from_vec(vec![0.5f64.to_radians()]);
        let track = ReferenceTrack::setpoint(value.clone(), 40).unwrap();
        assert_eq!(track.len(), 40);
        assert!(track.points().iter().all(|p| p == &value));
        // Window starting past the end holds the final point.
        let w = track.window(39, 3);
        assert_eq!(w.len(), 3);
        assert!(w.iter().all(|&v| (v - value[0]).abs() < 1e-15));
    }

    #[test]
    fn window_stacks_step_major() {
        let track = ReferenceTrack::polyline(
            &[DVector::from_vec(vec![0.0, 10.0]), DVector::from_vec(vec![4.0, 14.0])],
            5,
        )
        .unwrap();
        let w = track.window(1, 2);
        assert_eq!(w.len(), 4);
        assert_abs_diff_eq!(w[0], track.point(1)[0], epsilon = 0.0);
        assert_abs_diff_eq!(w[1], track.point(1)[1], epsilon = 0.0);
        assert_abs_diff_eq!(w[2], track.point(2)[0], epsilon = 0.0);
        assert_abs_diff_eq!(w[3], track.point(2)[1], epsilon = 0.0);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let err = UnsafeBox::new(
            vec![0, 1],
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.0]),
        );
        assert!(matches!(err, Err(PlantError::InvalidGeometry(_))));
    }

    #[test]
    fn face_chooser_prefers_the_side_the_reference_lives_on() {
        // Box x ∈ [0.3, 0.6], y ∈ [0.1, 0.4]; reference sits left of it.
        let keep_out = UnsafeBox::new(
            vec![0, 1],
            DVector::from_vec(vec![0.3, 0.1]),
            DVector::from_vec(vec![0.6, 0.4]),
        )
        .unwrap();
        let reference: Vec<DVector<f64>> = (0..20)
            .map(|k| DVector::from_vec(vec![0.1 + 0.001 * k as f64, 0.25, 0.0]))
            .collect();
        let face = choose_separating_face(&keep_out, &reference);
        assert_eq!(face.output_channel, 0);
        assert!(face.keep_below);
        assert_abs_diff_eq!(face.bound, 0.3, epsilon = 0.0);
        // Every reference point satisfies the chosen face outright.
        assert!(reference.iter().all(|r| face.satisfied(r, 0.0)));
    }

    #[test]
    fn box_rows_cover_each_horizon_step() {
        let keep_out = UnsafeBox::new(
            vec![1],
            DVector::from_vec(vec![0.5]),
            DVector::from_vec(vec![0.8]),
        )
        .unwrap();
        // Reference above the box → keep-above face, rows −y ≤ −(hi+margin).
        let reference: Vec<DVector<f64>> =
            (0..10).map(|_| DVector::from_vec(vec![0.0, 1.0, 0.0])).collect();
        let n = 4;
        let p = 3;
        let m = 3;
        let margin = 0.05;
        let (face, rows) = unsafe_box_constraint(&keep_out, &reference, m, p, n, margin).unwrap();
        assert!(!face.keep_below);
        assert_eq!(rows.len(), n);
        for (step, hs) in rows.iter().enumerate() {
            assert_eq!(hs.a_y.len(), p * n);
            assert_eq!(hs.a_u.len(), m * n);
            assert_abs_diff_eq!(hs.a_u.amax(), 0.0, epsilon = 0.0);
            assert_abs_diff_eq!(hs.a_y[step * p + 1], -1.0, epsilon = 0.0);
            assert_abs_diff_eq!(hs.a_y.amax(), 1.0, epsilon = 0.0);
            assert_abs_diff_eq!(hs.b, -(0.8 + margin), epsilon = 1e-15);
        }
        // A pose outside the face satisfies the row; inside violates it.
        let outside = DVector::from_vec(vec![0.0, 0.9, 0.0]);
        let inside = DVector::from_vec(vec![0.0, 0.6, 0.0]);
        assert!(face.satisfied(&outside, 0.0));
        assert!(!face.satisfied(&inside, 0.0));
    }
}
