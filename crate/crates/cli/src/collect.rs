//! Offline data collection: excite the plant with random inputs, record
//! input/output trajectories, and reject episodes that leave the
//! configured workspace.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deene_core::signal::Dataset;
use deene_core::signal::{build_mosaic_hankel, HankelPartition, IOTrajectory};

use crate::config::{CliError, ExperimentConfig, PlantSpec};

/// Outcome of a collection campaign.
#[derive(Debug)]
pub struct CollectionReport {
    /// The recorded trajectories, in collection order.
    pub trajectories: Vec<IOTrajectory>,
    /// Episodes discarded for leaving the workspace.
    pub rejected: usize,
}

/// Runs the collection campaign described by the config.
///
/// Each episode starts the plant at a fresh uniform random state (joint
/// angles near the configured pose for the arm, states near zero for the
/// linear plant) and applies inputs drawn iid uniform within the input
/// bounds.  Episodes whose outputs leave the workspace are discarded and
/// redrawn; when more than ninety percent of the attempted episodes are
/// rejected the campaign gives up with a configuration error.  The whole
/// campaign is driven by one seeded generator, so the same config produces
/// a byte-identical dataset every time.
pub fn collect_data(config: &ExperimentConfig) -> Result<CollectionReport, CliError> {
    let (lo, hi) = config.cost.input_bounds.ok_or_else(|| {
        CliError::Config("data collection needs input bounds to draw excitation from".into())
    })?;
    let m = config.plant.input_dim();
    let n_states = config.plant.state_dim();
    let samples = config.data.samples_per_trajectory;
    let wanted = config.data.n_trajectories;
    let max_attempts = 10 * wanted + 10;

    let mut rng = ChaCha8Rng::seed_from_u64(config.data.seed);
    let mut trajectories = Vec::with_capacity(wanted);
    let mut rejected = 0usize;
    let mut attempts = 0usize;

    while trajectories.len() < wanted {
        if attempts >= max_attempts {
            return Err(CliError::Config(format!(
                "workspace rejected {rejected} of {attempts} episodes (over ninety percent); \
                 widen the workspace, shrink initial_range, or lower the excitation amplitude"
            )));
        }
        attempts += 1;

        // Everything random about the episode comes from the master stream,
        // in a fixed order, so rejections keep the campaign deterministic.
        let initial_state: Vec<f64> = (0..n_states)
            .map(|i| {
                let center = match &config.plant {
                    PlantSpec::PlanarArm { initial_angles, .. } => initial_angles[i],
                    PlantSpec::Lti { .. } => 0.0,
                };
                center + config.data.initial_range * rng.random_range(-1.0..=1.0)
            })
            .collect();
        let noise_seed = rng.next_u64();
        let inputs: Vec<DVector<f64>> = (0..samples)
            .map(|_| DVector::from_fn(m, |_, _| rng.random_range(lo..=hi)))
            .collect();

        let mut plant = config.plant.build_episode(&initial_state, noise_seed)?;
        let mut outputs = Vec::with_capacity(samples);
        let mut exited = false;
        for u in &inputs {
            let y = plant.step(u);
            if let Some(ws) = &config.data.workspace {
                if !ws.contains(&y) {
                    exited = true;
                    break;
                }
            }
            outputs.push(y);
        }
        if exited {
            rejected += 1;
            continue;
        }

        let traj = IOTrajectory::new(inputs, outputs, config.plant.sample_period())
            .map_err(|e| CliError::Config(format!("recording episode: {e}")))?;
        trajectories.push(traj);
    }

    Ok(CollectionReport {
        trajectories,
        rejected,
    })
}

/// Saves trajectories as one JSON dataset.
pub fn save_dataset(trajectories: &[IOTrajectory], path: &Path) -> Result<(), CliError> {
    let dataset = Dataset::from_trajectories(trajectories)
        .map_err(|e| CliError::Config(format!("assembling dataset: {e}")))?;
    dataset
        .save(path)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

/// Loads a JSON dataset back into trajectories.
pub fn load_dataset(path: &Path) -> Result<Vec<IOTrajectory>, CliError> {
    Dataset::load(path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))
}

/// Builds the mosaic partition for the configured window sizes and checks
/// that the stacked input rows have full row rank (the data are rich
/// enough to span every input sequence over the combined window).
pub fn build_partition(
    trajectories: &[IOTrajectory],
    t_ini: usize,
    horizon: usize,
) -> Result<HankelPartition, CliError> {
    let partition = build_mosaic_hankel(trajectories, t_ini, horizon)
        .map_err(|e| CliError::Config(format!("building data matrices: {e}")))?;
    let stacked = partition.stacked_inputs();
    let svd = stacked.clone().svd(false, false);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * sigma_max)
        .count();
    if rank < stacked.nrows() {
        return Err(CliError::Config(format!(
            "input data are not rich enough: the stacked input rows reach rank {rank} of {}; \
             collect longer or more varied trajectories",
            stacked.nrows()
        )));
    }
    Ok(partition)
}
