//! Plot-ready exports of a finished run: per-step CSVs split by signal
//! group, the keep-out geometry as a JSON sidecar, and a short markdown
//! report.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use deene_core::deene::ClosedLoopTrace;
use deene_core::plants::SeparatingFace;

use crate::config::{CliError, ExperimentConfig};

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, CliError> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", path.display())))?;
    Ok(std::io::BufWriter::new(file))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("writing {}: {e}", path.display()))
}

/// Keep-out geometry as stored in the JSON sidecar.
#[derive(Debug, Serialize)]
struct BoxSidecar<'a> {
    channels: &'a [usize],
    lo: &'a [f64],
    hi: &'a [f64],
    margin: f64,
    /// The separating face the constraint rows enforce.
    face_channel: usize,
    face_keep_below: bool,
    face_bound: f64,
}

/// Writes the plot bundle for one trace.  Returns the files written.
///
/// - `inputs.csv`: every input channel per step.
/// - `path.csv`: actual vs reference on the configured position channels.
/// - `orientation.csv`: actual vs reference on the remaining channels
///   (skipped when there are none).
/// - `box.json`: keep-out geometry sidecar (only with a safety box).
/// - `report.md`: run summary.
pub fn write_plot_data(
    trace: &ClosedLoopTrace,
    config: &ExperimentConfig,
    face: Option<&SeparatingFace>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let m = trace.rows.first().map_or(0, |r| r.input.len());
    let p = trace.rows.first().map_or(0, |r| r.output.len());
    let dt = config.plant.sample_period();
    let mut written = Vec::new();

    // Inputs.
    let path = out_dir.join("inputs.csv");
    {
        let mut out = create(&path)?;
        let err = io_err(&path);
        write!(out, "step,time_seconds").map_err(&err)?;
        for c in 0..m {
            write!(out, ",u_{}", c + 1).map_err(&err)?;
        }
        writeln!(out).map_err(&err)?;
        for row in &trace.rows {
            write!(out, "{},{}", row.step, row.step as f64 * dt).map_err(&err)?;
            for c in 0..m {
                write!(out, ",{}", row.input[c]).map_err(&err)?;
            }
            writeln!(out).map_err(&err)?;
        }
    }
    written.push(path);

    // Position channels: actual path against the reference path.
    let position: Vec<usize> = config
        .position_channels
        .iter()
        .copied()
        .filter(|&c| c < p)
        .collect();
    let path = out_dir.join("path.csv");
    {
        let mut out = create(&path)?;
        let err = io_err(&path);
        write!(out, "step,time_seconds").map_err(&err)?;
        for &c in &position {
            write!(out, ",y_{0},r_{0}", c + 1).map_err(&err)?;
        }
        writeln!(out).map_err(&err)?;
        for row in &trace.rows {
            write!(out, "{},{}", row.step, row.step as f64 * dt).map_err(&err)?;
            for &c in &position {
                write!(out, ",{},{}", row.output[c], row.reference[c]).map_err(&err)?;
            }
            writeln!(out).map_err(&err)?;
        }
    }
    written.push(path);

    // Everything that is not a position channel (for the arm: heading).
    let orientation: Vec<usize> = (0..p).filter(|c| !position.contains(c)).collect();
    if !orientation.is_empty() {
        let path = out_dir.join("orientation.csv");
        {
            let mut out = create(&path)?;
            let err = io_err(&path);
            write!(out, "step,time_seconds").map_err(&err)?;
            for &c in &orientation {
                write!(out, ",y_{0},r_{0}", c + 1).map_err(&err)?;
            }
            writeln!(out).map_err(&err)?;
            for row in &trace.rows {
                write!(out, "{},{}", row.step, row.step as f64 * dt).map_err(&err)?;
                for &c in &orientation {
                    write!(out, ",{},{}", row.output[c], row.reference[c]).map_err(&err)?;
                }
                writeln!(out).map_err(&err)?;
            }
        }
        written.push(path);
    }

    // Keep-out geometry for overlaying on the path plot.
    if let (Some(safety), Some(face)) = (&config.safety, face) {
        let path = out_dir.join("box.json");
        let sidecar = BoxSidecar {
            channels: &safety.channels,
            lo: &safety.lo,
            hi: &safety.hi,
            margin: safety.margin,
            face_channel: face.output_channel,
            face_keep_below: face.keep_below,
            face_bound: face.bound,
        };
        let text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| CliError::Io(format!("encoding box geometry: {e}")))?;
        std::fs::write(&path, text).map_err(io_err(&path))?;
        written.push(path);
    }

    // Summary.
    let path = out_dir.join("report.md");
    {
        let summary = trace.summary(&position);
        let mut out = create(&path)?;
        let err = io_err(&path);
        writeln!(out, "# Run report\n").map_err(&err)?;
        writeln!(out, "- mode: {}", summary.mode).map_err(&err)?;
        writeln!(out, "- open-loop length: {}", summary.open_loop_len).map_err(&err)?;
        writeln!(out, "- steps: {}", summary.steps).map_err(&err)?;
        writeln!(out, "- position rmse: {:.6e}", summary.rmse_position).map_err(&err)?;
        writeln!(out, "- all-channel rmse: {:.6e}", summary.rmse_all_channels).map_err(&err)?;
        match (summary.mean_loop_seconds, summary.median_loop_seconds) {
            (Some(mean), Some(median)) => {
                writeln!(out, "- loop seconds: mean {mean:.6e}, median {median:.6e}")
                    .map_err(&err)?;
            }
            _ => writeln!(out, "- loop seconds: not recorded").map_err(&err)?,
        }
        writeln!(out, "- fallbacks: {}", summary.fallback_count).map_err(&err)?;
        match &summary.aborted {
            Some(msg) => writeln!(out, "- aborted: {msg}").map_err(&err)?,
            None => writeln!(out, "- completed normally").map_err(&err)?,
        }
    }
    written.push(path);

    Ok(written)
}
