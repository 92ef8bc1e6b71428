//! On-disk formats for trajectory datasets.
//!
//! The canonical format is a single JSON document:
//!
//! ```json
//! {
//!   "m": 2,
//!   "p": 1,
//!   "sample_period": 0.1,
//!   "trajectories": [
//!     { "u": [[0.1, 0.2], [0.3, 0.4]], "y": [[1.0], [1.1]] }
//!   ]
//! }
//! ```
//!
//! with one inner array per time step.  Individual trajectories can also
//! be exchanged as CSV with a `u_1,...,u_m,y_1,...,y_p` header and one row
//! per time step.

use super::{IOTrajectory, SignalError};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrajectoryRecord {
    u: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

/// A collection of recorded trajectories with shared channel counts and
/// sample period; the serde representation is the dataset JSON schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    m: usize,
    p: usize,
    sample_period: f64,
    trajectories: Vec<TrajectoryRecord>,
}

impl Dataset {
    /// Wraps validated trajectories for serialization.
    pub fn from_trajectories(trajectories: &[IOTrajectory]) -> Result<Self, SignalError> {
        if trajectories.is_empty() {
            return Err(SignalError::Empty);
        }
        let m = trajectories[0].input_dim();
        let p = trajectories[0].output_dim();
        let sample_period = trajectories[0].sample_period();
        for (index, traj) in trajectories.iter().enumerate() {
            if traj.input_dim() != m || traj.output_dim() != p {
                return Err(SignalError::DimensionMismatch(format!(
                    "trajectory {index} has {}/{} channels, expected {m}/{p}",
                    traj.input_dim(),
                    traj.output_dim()
                )));
            }
            if traj.sample_period() != sample_period {
                return Err(SignalError::DimensionMismatch(format!(
                    "trajectory {index} has sample period {}, expected {sample_period}",
                    traj.sample_period()
                )));
            }
        }
        Ok(Dataset {
            m,
            p,
            sample_period,
            trajectories: trajectories
                .iter()
                .map(|traj| TrajectoryRecord {
                    u: traj.inputs().iter().map(|v| v.as_slice().to_vec()).collect(),
                    y: traj
                        .outputs()
                        .iter()
                        .map(|v| v.as_slice().to_vec())
                        .collect(),
                })
                .collect(),
        })
    }

    /// Validates the parsed document and returns owned trajectories.
    pub fn into_trajectories(self) -> Result<Vec<IOTrajectory>, SignalError> {
        let mut out = Vec::with_capacity(self.trajectories.len());
        for (index, rec) in self.trajectories.into_iter().enumerate() {
            let to_vectors = |rows: Vec<Vec<f64>>, dim: usize, what: &str| {
                rows.into_iter()
                    .enumerate()
                    .map(|(t, row)| {
                        if row.len() != dim {
                            Err(SignalError::DimensionMismatch(format!(
                                "trajectory {index} {what} sample {t} has {} entries, expected {dim}",
                                row.len()
                            )))
                        } else {
                            Ok(DVector::from_vec(row))
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()
            };
            let inputs = to_vectors(rec.u, self.m, "input")?;
            let outputs = to_vectors(rec.y, self.p, "output")?;
            out.push(IOTrajectory::new(inputs, outputs, self.sample_period)?);
        }
        if out.is_empty() {
            return Err(SignalError::Empty);
        }
        Ok(out)
    }

    /// Serializes to pretty-printed JSON (stable byte-for-byte for equal
    /// contents).
    pub fn to_json(&self) -> Result<String, SignalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses the dataset JSON schema.
    pub fn from_json(text: &str) -> Result<Self, SignalError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes the dataset JSON to a file.
    pub fn save(&self, path: &Path) -> Result<(), SignalError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_json()?.as_bytes())?;
        file.write_all(b"\n")?;
        Ok(())
    }

    /// Reads a dataset JSON file and returns the validated trajectories.
    pub fn load(path: &Path) -> Result<Vec<IOTrajectory>, SignalError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)?.into_trajectories()
    }
}

/// Writes one trajectory as CSV: header `u_1,...,u_m,y_1,...,y_p`, one row
/// per time step, shortest round-trip float formatting.
pub fn write_trajectory_csv(traj: &IOTrajectory, path: &Path) -> Result<(), SignalError> {
    let mut text = String::new();
    let m = traj.input_dim();
    let p = traj.output_dim();
    let header: Vec<String> = (1..=m)
        .map(|c| format!("u_{c}"))
        .chain((1..=p).map(|c| format!("y_{c}")))
        .collect();
    text.push_str(&header.join(","));
    text.push('\n');
    for t in 0..traj.len() {
        let row: Vec<String> = traj.inputs()[t]
            .iter()
            .chain(traj.outputs()[t].iter())
            .map(|v| format!("{v}"))
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads one trajectory from CSV, inferring channel counts from the
/// `u_1,...,u_m,y_1,...,y_p` header.
pub fn read_trajectory_csv(path: &Path, sample_period: f64) -> Result<IOTrajectory, SignalError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(SignalError::Csv {
        line: 1,
        message: "file is empty, expected a u_*/y_* header".to_string(),
    })?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let m = names.iter().take_while(|n| n.starts_with("u_")).count();
    let p = names.len() - m;
    if m == 0 || p == 0 || !names[m..].iter().all(|n| n.starts_with("y_")) {
        return Err(SignalError::Csv {
            line: 1,
            message: format!("header must be u_1..u_m,y_1..y_p, got {header:?}"),
        });
    }
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != m + p {
            return Err(SignalError::Csv {
                line: idx + 1,
                message: format!("expected {} fields, got {}", m + p, fields.len()),
            });
        }
        let values: Vec<f64> = fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| SignalError::Csv {
                    line: idx + 1,
                    message: format!("bad float {f:?}: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        inputs.push(DVector::from_vec(values[..m].to_vec()));
        outputs.push(DVector::from_vec(values[m..].to_vec()));
    }
    IOTrajectory::new(inputs, outputs, sample_period)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sample_trajectories() -> Vec<IOTrajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..3)
            .map(|_| {
                let inputs = (0..6)
                    .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)))
                    .collect();
                let outputs = (0..6)
                    .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)))
                    .collect();
                IOTrajectory::new(inputs, outputs, 0.05).unwrap()
            })
            .collect()
    }

    #[test]
    fn dataset_json_round_trip_preserves_values() {
        let trajs = sample_trajectories();
        let json = Dataset::from_trajectories(&trajs).unwrap().to_json().unwrap();
        let back = Dataset::from_json(&json).unwrap().into_trajectories().unwrap();
        assert_eq!(trajs, back);
    }

    #[test]
    fn dataset_json_is_deterministic() {
        let trajs = sample_trajectories();
        let a = Dataset::from_trajectories(&trajs).unwrap().to_json().unwrap();
        let b = Dataset::from_trajectories(&trajs).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_json_schema_shape() {
        let trajs = sample_trajectories();
        let json = Dataset::from_trajectories(&trajs).unwrap().to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["m"], 2);
        assert_eq!(value["p"], 3);
        assert_eq!(value["sample_period"], 0.05);
        assert_eq!(value["trajectories"].as_array().unwrap().len(), 3);
        assert_eq!(
            value["trajectories"][0]["u"].as_array().unwrap().len(),
            6
        );
        assert_eq!(
            value["trajectories"][0]["u"][0].as_array().unwrap().len(),
            2
        );
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let trajs = sample_trajectories();
        let dir = std::env::temp_dir().join("deene-signal-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.csv");
        write_trajectory_csv(&trajs[0], &path).unwrap();
        let back = read_trajectory_csv(&path, 0.05).unwrap();
        assert_eq!(trajs[0], back);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn malformed_csv_reports_line() {
        let dir = std::env::temp_dir().join("deene-signal-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "u_1,y_1\n0.5,1.0\noops,2.0\n").unwrap();
        let err = read_trajectory_csv(&path, 1.0).unwrap_err();
        match err {
            SignalError::Csv { line, .. } => assert_eq!(line, 3),
            other => panic!("expected Csv error, got {other:?}"),
        }
        std::fs::remove_file(&path).ok();
    }
}
