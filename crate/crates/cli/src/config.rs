//! Experiment configuration: one JSON document describing the plant, the
//! tracking cost, the data-collection campaign, the controller, and the
//! reference — validated as a whole before anything runs.

use std::fmt;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use deene_core::deene::{ControllerMode, ControllerOptions};
use deene_core::deepc::{DeepcConfig, Halfspace};
use deene_core::plants::{
    LtiPlant, PlanarArm, Plant, ReferenceTrack, SeparatingFace, SinusoidSpec, UnsafeBox,
    unsafe_box_constraint,
};

/// Failure of a CLI operation, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or unusable inputs (exit code 2).
    Config(String),
    /// I/O failure reading or writing artifacts (exit code 2).
    Io(String),
    /// The solver or the closed loop failed (exit code 3).
    Solver(String),
}

impl CliError {
    /// Process exit code the error maps to.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Io(msg) => write!(f, "i/o error: {msg}"),
            CliError::Solver(msg) => write!(f, "solver failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

fn default_sample_period() -> f64 {
    0.1
}

fn default_rate_limits() -> (f64, f64) {
    (-std::f64::consts::FRAC_PI_6, std::f64::consts::FRAC_PI_6)
}

fn default_bootstrap_scale() -> f64 {
    0.5
}

fn default_safeguard_tol() -> f64 {
    1e-6
}

fn default_initial_range() -> f64 {
    0.5
}

fn default_margin() -> f64 {
    0.02
}

/// Which simulated plant the experiment drives.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    /// Serial planar arm driven by joint velocities, measuring the
    /// end-effector pose `(x, y, heading)`.
    PlanarArm {
        /// Link lengths, one per joint.
        link_lengths: Vec<f64>,
        /// Seconds per control step.
        #[serde(default = "default_sample_period")]
        sample_period: f64,
        /// Actuator saturation `[lo, hi]` applied to every joint velocity.
        #[serde(default = "default_rate_limits")]
        rate_limits: (f64, f64),
        /// Measurement noise standard deviation per output channel
        /// (empty = noiseless).
        #[serde(default)]
        noise_std: Vec<f64>,
        /// Seed of the measurement-noise stream.
        #[serde(default)]
        noise_seed: u64,
        /// Joint angles the controlled runs start from.
        initial_angles: Vec<f64>,
    },
    /// A seeded random internally-stable linear plant.
    Lti {
        state_dim: usize,
        input_dim: usize,
        output_dim: usize,
        /// Seed that determines the system matrices.
        seed: u64,
        #[serde(default)]
        noise_std: Vec<f64>,
        #[serde(default)]
        noise_seed: u64,
    },
}

impl PlantSpec {
    /// Input channel count.
    pub fn input_dim(&self) -> usize {
        match self {
            PlantSpec::PlanarArm { link_lengths, .. } => link_lengths.len(),
            PlantSpec::Lti { input_dim, .. } => *input_dim,
        }
    }

    /// Output channel count.
    pub fn output_dim(&self) -> usize {
        match self {
            PlantSpec::PlanarArm { .. } => 3,
            PlantSpec::Lti { output_dim, .. } => *output_dim,
        }
    }

    /// Seconds per sample (1.0 for the dimensionless linear plant).
    pub fn sample_period(&self) -> f64 {
        match self {
            PlantSpec::PlanarArm { sample_period, .. } => *sample_period,
            PlantSpec::Lti { .. } => 1.0,
        }
    }

    /// Builds the plant with the given noise seed, at the configured
    /// starting state.
    pub fn build_with_noise_seed(&self, noise_seed: u64) -> Result<Box<dyn Plant>, CliError> {
        match self {
            PlantSpec::PlanarArm {
                link_lengths,
                sample_period,
                rate_limits,
                noise_std,
                initial_angles,
                ..
            } => {
                let mut arm = PlanarArm::new(link_lengths.clone(), *sample_period, *rate_limits)
                    .map_err(|e| CliError::Config(format!("plant: {e}")))?;
                if noise_std.iter().any(|&s| s > 0.0) {
                    arm = arm
                        .with_noise(noise_std.clone(), noise_seed)
                        .map_err(|e| CliError::Config(format!("plant noise: {e}")))?;
                }
                arm.set_joint_angles(DVector::from_vec(initial_angles.clone()))
                    .map_err(|e| CliError::Config(format!("initial angles: {e}")))?;
                Ok(Box::new(arm))
            }
            PlantSpec::Lti {
                state_dim,
                input_dim,
                output_dim,
                seed,
                noise_std,
                ..
            } => {
                let mut plant = LtiPlant::random_stable(*state_dim, *input_dim, *output_dim, *seed);
                if noise_std.iter().any(|&s| s > 0.0) {
                    plant = plant
                        .with_noise(noise_std.clone(), noise_seed)
                        .map_err(|e| CliError::Config(format!("plant noise: {e}")))?;
                }
                Ok(Box::new(plant))
            }
        }
    }

    /// Builds the plant for a controlled run, using the configured noise
    /// seed so repeated runs face identical noise.
    pub fn build(&self) -> Result<Box<dyn Plant>, CliError> {
        self.build_with_noise_seed(self.noise_seed())
    }

    /// The configured noise seed.
    pub fn noise_seed(&self) -> u64 {
        match self {
            PlantSpec::PlanarArm { noise_seed, .. } | PlantSpec::Lti { noise_seed, .. } => {
                *noise_seed
            }
        }
    }

    /// Dimension of the per-episode random initial state.
    pub fn state_dim(&self) -> usize {
        match self {
            PlantSpec::PlanarArm { link_lengths, .. } => link_lengths.len(),
            PlantSpec::Lti { state_dim, .. } => *state_dim,
        }
    }

    /// Builds a plant for one data-collection episode with the given
    /// initial state and per-episode noise seed.
    pub fn build_episode(
        &self,
        initial_state: &[f64],
        noise_seed: u64,
    ) -> Result<Box<dyn Plant>, CliError> {
        match self {
            PlantSpec::PlanarArm {
                link_lengths,
                sample_period,
                rate_limits,
                noise_std,
                ..
            } => {
                let mut arm = PlanarArm::new(link_lengths.clone(), *sample_period, *rate_limits)
                    .map_err(|e| CliError::Config(format!("plant: {e}")))?;
                if noise_std.iter().any(|&s| s > 0.0) {
                    arm = arm
                        .with_noise(noise_std.clone(), noise_seed)
                        .map_err(|e| CliError::Config(format!("plant noise: {e}")))?;
                }
                arm.set_joint_angles(DVector::from_column_slice(initial_state))
                    .map_err(|e| CliError::Config(format!("episode state: {e}")))?;
                Ok(Box::new(arm))
            }
            PlantSpec::Lti {
                state_dim,
                input_dim,
                output_dim,
                seed,
                noise_std,
                ..
            } => {
                let mut plant = LtiPlant::random_stable(*state_dim, *input_dim, *output_dim, *seed);
                if noise_std.iter().any(|&s| s > 0.0) {
                    plant = plant
                        .with_noise(noise_std.clone(), noise_seed)
                        .map_err(|e| CliError::Config(format!("plant noise: {e}")))?;
                }
                plant
                    .set_state(DVector::from_column_slice(initial_state))
                    .map_err(|e| CliError::Config(format!("episode state: {e}")))?;
                Ok(Box::new(plant))
            }
        }
    }
}

/// One extra scalar output constraint `coeff · y[channel](step) ≤ bound`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarHalfspace {
    pub channel: usize,
    pub step: usize,
    pub coeff: f64,
    pub bound: f64,
}

/// Tracking-cost weights and constraint bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    /// Window length pinning the latent state.
    pub t_ini: usize,
    /// Prediction horizon.
    pub horizon: usize,
    /// Output tracking weight (`Q = q_scale·I`).
    pub q_scale: f64,
    /// Input effort weight (`R = r_scale·I`).
    pub r_scale: f64,
    /// Output window slack penalty.
    pub lambda_y: f64,
    /// Input window slack penalty.
    pub lambda_u: f64,
    /// Optimizer-norm regularization (must be positive).
    pub lambda_g: f64,
    /// Uniform `[lo, hi]` bound on every input channel.
    #[serde(default)]
    pub input_bounds: Option<(f64, f64)>,
    /// Uniform `[lo, hi]` bound on every output channel.
    #[serde(default)]
    pub output_bounds: Option<(f64, f64)>,
    /// Extra scalar output constraints.
    #[serde(default)]
    pub output_halfspaces: Vec<ScalarHalfspace>,
}

impl CostSpec {
    /// Assembles the solver configuration, appending the given safety rows.
    pub fn build(
        &self,
        input_dim: usize,
        output_dim: usize,
        safety_rows: Vec<Halfspace>,
    ) -> Result<DeepcConfig, CliError> {
        let mut config = DeepcConfig::scaled_identity(
            input_dim,
            output_dim,
            self.t_ini,
            self.horizon,
            self.q_scale,
            self.r_scale,
            self.lambda_y,
            self.lambda_u,
            self.lambda_g,
        );
        if let Some((lo, hi)) = self.input_bounds {
            config = config.with_uniform_input_bounds(lo, hi);
        }
        if let Some((lo, hi)) = self.output_bounds {
            config = config.with_uniform_output_bounds(lo, hi);
        }
        for hs in &self.output_halfspaces {
            if hs.channel >= output_dim || hs.step >= self.horizon {
                return Err(CliError::Config(format!(
                    "output halfspace points at channel {} step {}, outside {} channels × {} steps",
                    hs.channel, hs.step, output_dim, self.horizon
                )));
            }
            let mut a_y = DVector::zeros(output_dim * self.horizon);
            a_y[hs.step * output_dim + hs.channel] = hs.coeff;
            config.extra_halfspaces.push(Halfspace {
                a_y,
                a_u: DVector::zeros(input_dim * self.horizon),
                b: hs.bound,
            });
        }
        config.extra_halfspaces.extend(safety_rows);
        Ok(config)
    }
}

/// Keep-in region for data collection: episodes leaving it are redrawn.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceSpec {
    /// Output channels the region constrains.
    pub channels: Vec<usize>,
    /// Lower bound per listed channel.
    pub lo: Vec<f64>,
    /// Upper bound per listed channel.
    pub hi: Vec<f64>,
}

impl WorkspaceSpec {
    /// True when the output point stays inside the region.
    pub fn contains(&self, y: &DVector<f64>) -> bool {
        self.channels
            .iter()
            .enumerate()
            .all(|(i, &c)| y[c] >= self.lo[i] && y[c] <= self.hi[i])
    }
}

/// Data-collection campaign settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Number of trajectories the dataset must contain.
    pub n_trajectories: usize,
    /// Samples recorded per trajectory.
    pub samples_per_trajectory: usize,
    /// Seed of the input/initial-state generator.
    pub seed: u64,
    /// Half-width of the uniform initial-state draw (joint angles for the
    /// arm, the state vector for the linear plant).
    #[serde(default = "default_initial_range")]
    pub initial_range: f64,
    /// Keep-in region; episodes that exit it are discarded and redrawn.
    #[serde(default)]
    pub workspace: Option<WorkspaceSpec>,
}

/// Closed-loop run settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    /// `"deepc"` (re-solve every cycle) or `"deene"` (correct a factorized
    /// nominal).
    pub mode: String,
    /// Open-loop length `s`.
    #[serde(default)]
    pub open_loop_len: usize,
    /// Number of controlled steps.
    pub total_steps: usize,
    /// Seed of the bootstrap-input generator.
    #[serde(default)]
    pub bootstrap_seed: u64,
    /// Bootstrap amplitude as a fraction of the input-bound half-width.
    #[serde(default = "default_bootstrap_scale")]
    pub bootstrap_scale: f64,
    /// Safeguard tolerance of the correction controller.
    #[serde(default = "default_safeguard_tol")]
    pub safeguard_tol: f64,
    /// Correction trust radius (`null` = unlimited).
    #[serde(default)]
    pub trust_radius: Option<f64>,
}

impl ControllerSpec {
    /// Parses the mode label.
    pub fn mode(&self) -> Result<ControllerMode, CliError> {
        ControllerMode::parse(&self.mode).ok_or_else(|| {
            CliError::Config(format!(
                "unknown controller mode {:?} (expected \"deepc\" or \"deene\")",
                self.mode
            ))
        })
    }

    /// Builds run options, optionally overriding mode/open-loop length
    /// (benchmarks sweep those) and disabling timing capture.
    pub fn options(
        &self,
        mode: ControllerMode,
        open_loop_len: usize,
        record_timing: bool,
    ) -> ControllerOptions {
        let mut options = ControllerOptions::new(mode, open_loop_len, self.total_steps);
        options.bootstrap_seed = self.bootstrap_seed;
        options.bootstrap_scale = self.bootstrap_scale;
        options.safeguard_tol = self.safeguard_tol;
        options.trust_radius = self.trust_radius.unwrap_or(f64::INFINITY);
        options.record_timing = record_timing;
        options
    }
}

/// One sinusoidal reference channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidChannel {
    pub amplitude: f64,
    pub period_samples: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub offset: f64,
}

/// Reference trajectory description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// Independent sinusoid per output channel.
    Sinusoid {
        channels: Vec<SinusoidChannel>,
        length: usize,
    },
    /// Constant-speed traversal of waypoints.
    Polyline {
        waypoints: Vec<Vec<f64>>,
        length: usize,
    },
    /// Hold one point.
    Setpoint { value: Vec<f64>, length: usize },
}

impl ReferenceSpec {
    /// Number of output channels the reference drives.
    pub fn channels(&self) -> usize {
        match self {
            ReferenceSpec::Sinusoid { channels, .. } => channels.len(),
            ReferenceSpec::Polyline { waypoints, .. } => {
                waypoints.first().map_or(0, |w| w.len())
            }
            ReferenceSpec::Setpoint { value, .. } => value.len(),
        }
    }

    /// Builds the sampled track.
    pub fn build(&self) -> Result<ReferenceTrack, CliError> {
        let map_err = |e| CliError::Config(format!("reference: {e}"));
        match self {
            ReferenceSpec::Sinusoid { channels, length } => {
                let specs: Vec<SinusoidSpec> = channels
                    .iter()
                    .map(|c| SinusoidSpec {
                        amplitude: c.amplitude,
                        period_samples: c.period_samples,
                        phase: c.phase,
                        offset: c.offset,
                    })
                    .collect();
                ReferenceTrack::sinusoid(&specs, *length).map_err(map_err)
            }
            ReferenceSpec::Polyline { waypoints, length } => {
                let points: Vec<DVector<f64>> = waypoints
                    .iter()
                    .map(|w| DVector::from_vec(w.clone()))
                    .collect();
                ReferenceTrack::polyline(&points, *length).map_err(map_err)
            }
            ReferenceSpec::Setpoint { value, length } => {
                ReferenceTrack::setpoint(DVector::from_vec(value.clone()), *length)
                    .map_err(map_err)
            }
        }
    }
}

/// Keep-out box the controlled output must avoid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetySpec {
    /// Output channels the box spans.
    pub channels: Vec<usize>,
    /// Lower corner per listed channel.
    pub lo: Vec<f64>,
    /// Upper corner per listed channel.
    pub hi: Vec<f64>,
    /// Extra distance the constraint keeps from the box face.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

impl SafetySpec {
    /// The box as a plant-layer object.
    pub fn keep_out(&self) -> Result<UnsafeBox, CliError> {
        UnsafeBox::new(
            self.channels.clone(),
            DVector::from_vec(self.lo.clone()),
            DVector::from_vec(self.hi.clone()),
        )
        .map_err(|e| CliError::Config(format!("safety box: {e}")))
    }

    /// Chooses the separating face against the reference and emits the
    /// per-step constraint rows.
    pub fn constraint_rows(
        &self,
        reference: &ReferenceTrack,
        input_dim: usize,
        output_dim: usize,
        horizon: usize,
    ) -> Result<(SeparatingFace, Vec<Halfspace>), CliError> {
        unsafe_box_constraint(
            &self.keep_out()?,
            reference.points(),
            input_dim,
            output_dim,
            horizon,
            self.margin,
        )
        .map_err(|e| CliError::Config(format!("safety constraint: {e}")))
    }
}

fn default_position_channels() -> Vec<usize> {
    vec![0, 1]
}

/// The whole experiment: one JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantSpec,
    pub cost: CostSpec,
    pub data: DataSpec,
    pub controller: ControllerSpec,
    pub reference: ReferenceSpec,
    /// Output channels reported as positions in summaries (for the arm, the
    /// end-effector `x, y`).
    #[serde(default = "default_position_channels")]
    pub position_channels: Vec<usize>,
    /// Optional keep-out box enforced through constraint rows.
    #[serde(default)]
    pub safety: Option<SafetySpec>,
}

impl ExperimentConfig {
    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("parsing {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Cross-field dimension and range checks; every run calls this before
    /// doing any work.
    pub fn validate(&self) -> Result<(), CliError> {
        let m = self.plant.input_dim();
        let p = self.plant.output_dim();
        let bad = |msg: String| Err(CliError::Config(msg));

        if m == 0 || p == 0 {
            return bad("plant must have at least one input and one output".into());
        }
        match &self.plant {
            PlantSpec::PlanarArm {
                link_lengths,
                initial_angles,
                noise_std,
                ..
            } => {
                if initial_angles.len() != link_lengths.len() {
                    return bad(format!(
                        "initial_angles has {} entries for {} joints",
                        initial_angles.len(),
                        link_lengths.len()
                    ));
                }
                if !noise_std.is_empty() && noise_std.len() != 3 {
                    return bad(format!(
                        "arm noise_std needs 3 entries (x, y, heading), got {}",
                        noise_std.len()
                    ));
                }
            }
            PlantSpec::Lti {
                state_dim,
                noise_std,
                output_dim,
                ..
            } => {
                if *state_dim == 0 {
                    return bad("linear plant needs at least one state".into());
                }
                if !noise_std.is_empty() && noise_std.len() != *output_dim {
                    return bad(format!(
                        "noise_std needs {output_dim} entries, got {}",
                        noise_std.len()
                    ));
                }
            }
        }

        if self.cost.t_ini == 0 || self.cost.horizon == 0 {
            return bad("t_ini and horizon must be positive".into());
        }
        if self.cost.lambda_g <= 0.0 || self.cost.lambda_g.is_nan() {
            return bad(format!(
                "lambda_g must be positive (got {})",
                self.cost.lambda_g
            ));
        }
        if let Some((lo, hi)) = self.cost.input_bounds {
            if lo >= hi || lo.is_nan() || hi.is_nan() {
                return bad(format!("input bounds [{lo}, {hi}] are empty"));
            }
        }
        if let Some((lo, hi)) = self.cost.output_bounds {
            if lo >= hi || lo.is_nan() || hi.is_nan() {
                return bad(format!("output bounds [{lo}, {hi}] are empty"));
            }
        }

        let depth = self.cost.t_ini + self.cost.horizon;
        if self.data.n_trajectories == 0 {
            return bad("n_trajectories must be positive".into());
        }
        if self.data.samples_per_trajectory <= depth {
            return bad(format!(
                "samples_per_trajectory must exceed t_ini + horizon = {depth} (got {})",
                self.data.samples_per_trajectory
            ));
        }
        if !self.data.initial_range.is_finite() || self.data.initial_range < 0.0 {
            return bad(format!(
                "initial_range must be finite and non-negative (got {})",
                self.data.initial_range
            ));
        }
        if let Some(ws) = &self.data.workspace {
            if ws.channels.len() != ws.lo.len() || ws.channels.len() != ws.hi.len() {
                return bad("workspace channels/lo/hi lengths differ".into());
            }
            if let Some(&c) = ws.channels.iter().find(|&&c| c >= p) {
                return bad(format!("workspace channel {c} out of range for {p} outputs"));
            }
            if ws
                .lo
                .iter()
                .zip(&ws.hi)
                .any(|(l, h)| l >= h || l.is_nan() || h.is_nan())
            {
                return bad("workspace has an empty side".into());
            }
        }

        self.controller.mode()?;
        if self.controller.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.controller.open_loop_len > self.cost.horizon {
            return bad(format!(
                "open_loop_len {} exceeds the horizon {}",
                self.controller.open_loop_len, self.cost.horizon
            ));
        }

        if self.reference.channels() != p {
            return bad(format!(
                "reference drives {} channels, the plant has {p} outputs",
                self.reference.channels()
            ));
        }
        match &self.reference {
            ReferenceSpec::Sinusoid { length, .. }
            | ReferenceSpec::Polyline { length, .. }
            | ReferenceSpec::Setpoint { length, .. } => {
                if *length == 0 {
                    return bad("reference length must be positive".into());
                }
            }
        }

        if self.position_channels.is_empty() {
            return bad("position_channels must not be empty".into());
        }
        if let Some(&c) = self.position_channels.iter().find(|&&c| c >= p) {
            return bad(format!(
                "position channel {c} out of range for {p} outputs"
            ));
        }

        if let Some(safety) = &self.safety {
            if safety.channels.len() != safety.lo.len() || safety.channels.len() != safety.hi.len()
            {
                return bad("safety channels/lo/hi lengths differ".into());
            }
            if let Some(&c) = safety.channels.iter().find(|&&c| c >= p) {
                return bad(format!("safety channel {c} out of range for {p} outputs"));
            }
            if !safety.margin.is_finite() || safety.margin < 0.0 {
                return bad(format!(
                    "safety margin must be finite and non-negative (got {})",
                    safety.margin
                ));
            }
        }
        Ok(())
    }

    /// Builds the reference track.
    pub fn reference(&self) -> Result<ReferenceTrack, CliError> {
        self.reference.build()
    }

    /// Builds the solver configuration, including any safety rows chosen
    /// against the reference.
    pub fn solver_config(
        &self,
        reference: &ReferenceTrack,
    ) -> Result<(DeepcConfig, Option<SeparatingFace>), CliError> {
        let m = self.plant.input_dim();
        let p = self.plant.output_dim();
        let (face, rows) = match &self.safety {
            Some(safety) => {
                let (face, rows) =
                    safety.constraint_rows(reference, m, p, self.cost.horizon)?;
                (Some(face), rows)
            }
            None => (None, Vec::new()),
        };
        let config = self.cost.build(m, p, rows)?;
        Ok((config, face))
    }
}
