//! Mode-by-mode benchmark: run the same scenario under both controllers
//! across a sweep of open-loop lengths and report accuracy, compute time,
//! and fallback counts side by side.

use serde::{Deserialize, Serialize};

use deene_core::deene::{run_controller_with, ClosedLoopTrace, ControllerMode};
use deene_core::deepc::DeepcProblem;
use deene_core::plants::ReferenceTrack;

use crate::collect::{build_partition, collect_data};
use crate::config::{CliError, ExperimentConfig};

/// One benchmark measurement: a mode at an open-loop length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: String,
    pub open_loop_len: usize,
    /// Steps actually completed (shorter than requested on failure).
    pub steps: usize,
    pub rmse_position: Option<f64>,
    pub rmse_all_channels: Option<f64>,
    pub mean_loop_seconds: Option<f64>,
    pub median_loop_seconds: Option<f64>,
    pub fallback_count: usize,
    /// Why the run failed, when it did.
    pub failed: Option<String>,
}

/// Where the numbers came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvironmentFingerprint {
    pub os: String,
    pub arch: String,
    pub family: String,
    /// True in unoptimized builds — timing numbers are then indicative only.
    pub debug_assertions: bool,
}

impl EnvironmentFingerprint {
    pub fn current() -> Self {
        EnvironmentFingerprint {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            family: std::env::consts::FAMILY.to_string(),
            debug_assertions: cfg!(debug_assertions),
        }
    }
}

/// The full benchmark result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub environment: EnvironmentFingerprint,
    /// Whether per-step compute times were captured.
    pub timing_enabled: bool,
    /// Open-loop lengths swept.
    pub open_loop_lens: Vec<usize>,
    pub rows: Vec<BenchRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6e}"),
        None => "-".to_string(),
    }
}

impl BenchmarkReport {
    /// Finds a completed row.
    pub fn row(&self, mode: &str, open_loop_len: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.open_loop_len == open_loop_len)
    }

    /// Renders the report as a markdown document with one table row per
    /// measurement and per-sweep comparison lines.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("# Benchmark report\n\n");
        out.push_str(&format!(
            "Environment: {} / {} ({}){}.  Timing {}.\n\n",
            self.environment.os,
            self.environment.arch,
            self.environment.family,
            if self.environment.debug_assertions {
                ", debug assertions on"
            } else {
                ""
            },
            if self.timing_enabled {
                "enabled"
            } else {
                "disabled"
            },
        ));
        out.push_str(
            "| mode | s | steps | rmse (position) | rmse (all) | mean loop [s] | median loop [s] | fallbacks | status |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for row in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                row.mode,
                row.open_loop_len,
                row.steps,
                fmt_opt(row.rmse_position),
                fmt_opt(row.rmse_all_channels),
                fmt_opt(row.mean_loop_seconds),
                fmt_opt(row.median_loop_seconds),
                row.fallback_count,
                match &row.failed {
                    None => "ok".to_string(),
                    Some(msg) => format!("failed: {msg}"),
                },
            ));
        }
        out.push('\n');
        for &s in &self.open_loop_lens {
            let a = self.row("deepc", s);
            let b = self.row("deene", s);
            if let (Some(a), Some(b)) = (a, b) {
                if a.failed.is_none() && b.failed.is_none() {
                    if let (Some(ra), Some(rb)) = (a.rmse_position, b.rmse_position) {
                        if rb > 0.0 {
                            out.push_str(&format!(
                                "- s = {s}: position-rmse ratio deepc/deene = {:.4}\n",
                                ra / rb
                            ));
                        }
                    }
                    if let (Some(ta), Some(tb)) = (a.median_loop_seconds, b.median_loop_seconds) {
                        if tb > 0.0 {
                            out.push_str(&format!(
                                "- s = {s}: median loop-time ratio deepc/deene = {:.4}\n",
                                ta / tb
                            ));
                        }
                    }
                }
            }
        }
        out
    }
}

/// A finished benchmark: the report plus every completed trace for
/// plotting or archiving, keyed by `(mode label, open-loop length)`.
#[derive(Debug)]
pub struct BenchmarkOutcome {
    pub report: BenchmarkReport,
    pub traces: Vec<(String, usize, ClosedLoopTrace)>,
}

fn run_one(
    config: &ExperimentConfig,
    problem: &DeepcProblem,
    reference: &ReferenceTrack,
    mode: ControllerMode,
    open_loop_len: usize,
    timing: bool,
) -> (BenchRow, Option<ClosedLoopTrace>) {
    let options = config.controller.options(mode, open_loop_len, timing);
    let plant = match config.plant.build() {
        Ok(p) => p,
        Err(e) => {
            return (
                BenchRow {
                    mode: mode.label().to_string(),
                    open_loop_len,
                    steps: 0,
                    rmse_position: None,
                    rmse_all_channels: None,
                    mean_loop_seconds: None,
                    median_loop_seconds: None,
                    fallback_count: 0,
                    failed: Some(e.to_string()),
                },
                None,
            );
        }
    };
    let mut plant = plant;
    match run_controller_with(plant.as_mut(), problem, reference, &options) {
        Ok(trace) => {
            let summary = trace.summary(&config.position_channels);
            let row = BenchRow {
                mode: summary.mode,
                open_loop_len,
                steps: summary.steps,
                rmse_position: Some(summary.rmse_position),
                rmse_all_channels: Some(summary.rmse_all_channels),
                mean_loop_seconds: summary.mean_loop_seconds,
                median_loop_seconds: summary.median_loop_seconds,
                fallback_count: summary.fallback_count,
                failed: summary.aborted,
            };
            (row, Some(trace))
        }
        Err(e) => (
            BenchRow {
                mode: mode.label().to_string(),
                open_loop_len,
                steps: 0,
                rmse_position: None,
                rmse_all_channels: None,
                mean_loop_seconds: None,
                median_loop_seconds: None,
                fallback_count: 0,
                failed: Some(e.to_string()),
            },
            None,
        ),
    }
}

/// Runs both controller modes at every requested open-loop length over one
/// shared dataset, plant seed, and bootstrap seed, so every difference in
/// the rows comes from the controllers themselves.
///
/// A failed run becomes a failed row; the report is still produced.  With
/// timing disabled the rows run in parallel; with timing enabled they run
/// one at a time so measurements never contend for cores.
pub fn run_benchmark(
    config: &ExperimentConfig,
    open_loop_lens: &[usize],
    timing: bool,
) -> Result<BenchmarkOutcome, CliError> {
    if open_loop_lens.is_empty() {
        return Err(CliError::Config(
            "benchmark needs at least one open-loop length".into(),
        ));
    }
    if let Some(&s) = open_loop_lens.iter().find(|&&s| s > config.cost.horizon) {
        return Err(CliError::Config(format!(
            "open-loop length {s} exceeds the horizon {}",
            config.cost.horizon
        )));
    }

    let collection = collect_data(config)?;
    let partition = build_partition(
        &collection.trajectories,
        config.cost.t_ini,
        config.cost.horizon,
    )?;
    let reference = config.reference()?;
    let (solver_config, _face) = config.solver_config(&reference)?;
    let problem = DeepcProblem::new(partition, solver_config)
        .map_err(|e| CliError::Config(format!("assembling the tracking problem: {e}")))?;

    let modes = [ControllerMode::Deepc, ControllerMode::Deene];
    let jobs: Vec<(ControllerMode, usize)> = open_loop_lens
        .iter()
        .flat_map(|&s| modes.iter().map(move |&m| (m, s)))
        .collect();

    let mut results: Vec<(BenchRow, Option<ClosedLoopTrace>)> = Vec::with_capacity(jobs.len());
    if timing {
        for &(mode, s) in &jobs {
            results.push(run_one(config, &problem, &reference, mode, s, true));
        }
    } else {
        let mut slots: Vec<Option<(BenchRow, Option<ClosedLoopTrace>)>> =
            (0..jobs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let problem = &problem;
            let reference = &reference;
            let handles: Vec<_> = jobs
                .iter()
                .map(|&(mode, s)| {
                    scope.spawn(move || run_one(config, problem, reference, mode, s, false))
                })
                .collect();
            for (slot, handle) in slots.iter_mut().zip(handles) {
                *slot = Some(handle.join().expect("benchmark worker panicked"));
            }
        });
        results.extend(slots.into_iter().map(|s| s.expect("worker slot filled")));
    }

    let mut rows = Vec::with_capacity(results.len());
    let mut traces = Vec::new();
    for ((mode, s), (row, trace)) in jobs.into_iter().zip(results) {
        rows.push(row);
        if let Some(trace) = trace {
            traces.push((mode.label().to_string(), s, trace));
        }
    }

    Ok(BenchmarkOutcome {
        report: BenchmarkReport {
            environment: EnvironmentFingerprint::current(),
            timing_enabled: timing,
            open_loop_lens: open_loop_lens.to_vec(),
            rows,
        },
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        ControllerSpec, CostSpec, DataSpec, PlantSpec, ReferenceSpec,
    };

    fn smoke_config() -> ExperimentConfig {
        ExperimentConfig {
            plant: PlantSpec::Lti {
                state_dim: 3,
                input_dim: 1,
                output_dim: 1,
                seed: 7,
                noise_std: vec![],
                noise_seed: 0,
            },
            cost: CostSpec {
                t_ini: 4,
                horizon: 6,
                q_scale: 100.0,
                r_scale: 0.1,
                lambda_y: 1e4,
                lambda_u: 1e4,
                lambda_g: 1.0,
                input_bounds: Some((-2.0, 2.0)),
                output_bounds: None,
                output_halfspaces: vec![],
            },
            data: DataSpec {
                n_trajectories: 3,
                samples_per_trajectory: 60,
                seed: 11,
                initial_range: 0.5,
                workspace: None,
            },
            controller: ControllerSpec {
                mode: "deene".into(),
                open_loop_len: 0,
                total_steps: 25,
                bootstrap_seed: 3,
                bootstrap_scale: 0.25,
                safeguard_tol: 1e-6,
                trust_radius: None,
            },
            reference: ReferenceSpec::Sinusoid {
                channels: vec![crate::config::SinusoidChannel {
                    amplitude: 0.3,
                    period_samples: 40.0,
                    phase: 0.0,
                    offset: 0.0,
                }],
                length: 80,
            },
            position_channels: vec![0],
            safety: None,
        }
    }

    #[test]
    fn empty_sweep_is_rejected() {
        let err = run_benchmark(&smoke_config(), &[], false).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn benchmark_runs_both_modes_at_each_length() {
        let outcome = run_benchmark(&smoke_config(), &[0, 3], false).unwrap();
        assert_eq!(outcome.report.rows.len(), 4);
        assert!(outcome.report.rows.iter().all(|r| r.failed.is_none()));
        assert_eq!(outcome.traces.len(), 4);
        // Timing disabled: no loop seconds captured.
        assert!(outcome
            .report
            .rows
            .iter()
            .all(|r| r.median_loop_seconds.is_none()));
        // Same seeds across modes: at s = 0 both modes track equally well.
        let a = outcome.report.row("deepc", 0).unwrap();
        let b = outcome.report.row("deene", 0).unwrap();
        let (ra, rb) = (a.rmse_position.unwrap(), b.rmse_position.unwrap());
        assert!(
            (ra - rb).abs() <= 0.05 * ra.max(rb).max(1e-12),
            "modes disagree at s = 0: {ra} vs {rb}"
        );
        let md = outcome.report.to_markdown();
        assert!(md.contains("| deepc | 0 |"), "{md}");
        assert!(md.contains("rmse ratio"), "{md}");
    }

    #[test]
    fn benchmark_report_is_deterministic_without_timing() {
        let a = run_benchmark(&smoke_config(), &[0, 2], false).unwrap();
        let b = run_benchmark(&smoke_config(), &[0, 2], false).unwrap();
        let ja = serde_json::to_string(&a.report).unwrap();
        let jb = serde_json::to_string(&b.report).unwrap();
        assert_eq!(ja, jb, "reports must be byte-identical across runs");
    }

    #[test]
    fn infeasible_constraints_become_a_failed_row() {
        let mut config = smoke_config();
        // Two contradictory rows on the first predicted output:
        // y ≤ -1 and -y ≤ -1 (y ≥ 1) cannot both hold.
        config.cost.output_halfspaces = vec![
            crate::config::ScalarHalfspace {
                channel: 0,
                step: 0,
                coeff: 1.0,
                bound: -1.0,
            },
            crate::config::ScalarHalfspace {
                channel: 0,
                step: 0,
                coeff: -1.0,
                bound: -1.0,
            },
        ];
        let outcome = run_benchmark(&config, &[0], false).unwrap();
        assert_eq!(outcome.report.rows.len(), 2);
        assert!(
            outcome.report.rows.iter().all(|r| r.failed.is_some()),
            "both rows should fail"
        );
        let md = outcome.report.to_markdown();
        assert!(md.contains("failed"), "{md}");
    }
}
