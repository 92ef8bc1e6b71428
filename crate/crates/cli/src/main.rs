//! Command-line harness: collect excitation data, solve one tracking
//! instance, run the closed loop, benchmark both controller modes, and
//! export plot-ready CSVs.
//!
//! Exit codes: 0 on success, 2 on configuration or i/o errors, 3 on solver
//! failures.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use deene_cli::bench::run_benchmark;
use deene_cli::collect::{build_partition, collect_data, save_dataset};
use deene_cli::config::{CliError, ExperimentConfig};
use deene_cli::plotdata::write_plot_data;
use deene_core::deepc::{DeepcProblem, InitialWindow};
use deene_core::deene::run_controller_with;

/// Data-driven predictive control experiments.
#[derive(Parser)]
#[command(name = "deene", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory the artifacts go to (default: DEENE_OUT_DIR or the
    /// current directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Excite the plant and record a dataset of input/output trajectories.
    Collect(Common),
    /// Bootstrap the plant, solve one tracking instance, and write the
    /// planned trajectory.
    Solve(Common),
    /// Run the configured closed-loop controller and write the trace.
    Run(Common),
    /// Run both controller modes across open-loop lengths and compare.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Open-loop lengths to sweep (comma-separated).
        #[arg(long, short = 's', value_delimiter = ',', required = true)]
        open_loop_lens: Vec<usize>,
        /// Capture per-step compute times (serializes the runs).
        #[arg(long, default_value_t = false)]
        timing: bool,
    },
    /// Run the configured controller and export plot-ready CSVs.
    PlotData(Common),
}

fn out_dir(flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = flag
        .or_else(|| std::env::var_os("DEENE_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("encoding {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

fn cmd_collect(common: Common) -> Result<(), CliError> {
    let config = ExperimentConfig::load(&common.config)?;
    let dir = out_dir(common.out_dir)?;
    let report = collect_data(&config)?;
    // Surface data problems (too short, not rich enough) at collection
    // time, not at the first solve.
    let partition = build_partition(
        &report.trajectories,
        config.cost.t_ini,
        config.cost.horizon,
    )?;
    let path = dir.join("dataset.json");
    save_dataset(&report.trajectories, &path)?;
    println!(
        "collected {} trajectories ({} sample(s) each, {} rejected) -> {}",
        report.trajectories.len(),
        config.data.samples_per_trajectory,
        report.rejected,
        path.display()
    );
    println!(
        "data matrices: {} columns at window {} + horizon {}",
        partition.num_columns(),
        config.cost.t_ini,
        config.cost.horizon
    );
    Ok(())
}

/// What `solve` writes: the first plan of a run with the same seeds.
#[derive(Serialize)]
struct SolveArtifact {
    objective: f64,
    iterations: usize,
    solve_seconds: f64,
    g_norm: f64,
    working_set: Vec<usize>,
    input_window_residual_norm: f64,
    output_window_residual_norm: f64,
}

fn cmd_solve(common: Common) -> Result<(), CliError> {
    let config = ExperimentConfig::load(&common.config)?;
    let dir = out_dir(common.out_dir)?;
    let report = collect_data(&config)?;
    let partition = build_partition(
        &report.trajectories,
        config.cost.t_ini,
        config.cost.horizon,
    )?;
    let reference = config.reference()?;
    let (solver_config, _face) = config.solver_config(&reference)?;
    let problem = DeepcProblem::new(partition, solver_config)
        .map_err(|e| CliError::Config(format!("assembling the tracking problem: {e}")))?;

    // The same bootstrap a closed-loop run performs: seeded uniform inputs
    // at the configured amplitude inside the bounds, so this solve shows
    // exactly the first plan of a run with the same seeds.
    let mut plant = config.plant.build()?;
    let m = config.plant.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.controller.bootstrap_seed);
    let scale = config.controller.bootstrap_scale;
    let mut boot_inputs = Vec::with_capacity(config.cost.t_ini);
    let mut boot_outputs = Vec::with_capacity(config.cost.t_ini);
    for _ in 0..config.cost.t_ini {
        let u = DVector::from_fn(m, |_c, _| {
            let draw: f64 = rng.random_range(-1.0..1.0);
            match config.cost.input_bounds {
                Some((lo, hi)) => {
                    let mid = 0.5 * (lo + hi);
                    let half = 0.5 * (hi - lo);
                    mid + scale * half * draw
                }
                None => scale * draw,
            }
        });
        let y = plant.step(&u);
        boot_inputs.push(u);
        boot_outputs.push(y);
    }
    let window = InitialWindow::new(boot_inputs, boot_outputs)
        .map_err(|e| CliError::Config(format!("bootstrap window: {e}")))?;
    let r_window = reference.window(0, config.cost.horizon);

    let sol = problem
        .solve(&window, &r_window, None)
        .map_err(|e| CliError::Solver(format!("tracking solve failed: {e}")))?;

    let artifact = SolveArtifact {
        objective: sol.objective,
        iterations: sol.iterations,
        solve_seconds: sol.solve_time,
        g_norm: sol.g.norm(),
        working_set: sol.working_set.clone(),
        input_window_residual_norm: sol.sigma_u.norm(),
        output_window_residual_norm: sol.sigma_y.norm(),
    };
    let sol_path = dir.join("solution.json");
    write_json(&artifact, &sol_path)?;

    // The planned trajectory, step-major.
    let p = config.plant.output_dim();
    let plan_path = dir.join("plan.csv");
    {
        use std::io::Write as _;
        let file = std::fs::File::create(&plan_path)
            .map_err(|e| CliError::Io(format!("creating {}: {e}", plan_path.display())))?;
        let mut out = std::io::BufWriter::new(file);
        let err = |e: std::io::Error| CliError::Io(format!("writing {}: {e}", plan_path.display()));
        write!(out, "step").map_err(err)?;
        for c in 0..m {
            write!(out, ",u_{}", c + 1).map_err(err)?;
        }
        for c in 0..p {
            write!(out, ",y_{}", c + 1).map_err(err)?;
        }
        for c in 0..p {
            write!(out, ",r_{}", c + 1).map_err(err)?;
        }
        writeln!(out).map_err(err)?;
        for step in 0..config.cost.horizon {
            write!(out, "{step}").map_err(err)?;
            for c in 0..m {
                write!(out, ",{}", sol.u[step * m + c]).map_err(err)?;
            }
            for c in 0..p {
                write!(out, ",{}", sol.y[step * p + c]).map_err(err)?;
            }
            for c in 0..p {
                write!(out, ",{}", r_window[step * p + c]).map_err(err)?;
            }
            writeln!(out).map_err(err)?;
        }
    }
    println!(
        "objective {:.6e} in {} iteration(s) -> {}, {}",
        sol.objective,
        sol.iterations,
        sol_path.display(),
        plan_path.display()
    );
    Ok(())
}

fn run_configured(
    config: &ExperimentConfig,
) -> Result<
    (
        deene_core::deene::ClosedLoopTrace,
        Option<deene_core::plants::SeparatingFace>,
    ),
    CliError,
> {
    let report = collect_data(config)?;
    let partition = build_partition(
        &report.trajectories,
        config.cost.t_ini,
        config.cost.horizon,
    )?;
    let reference = config.reference()?;
    let (solver_config, face) = config.solver_config(&reference)?;
    let problem = DeepcProblem::new(partition, solver_config)
        .map_err(|e| CliError::Config(format!("assembling the tracking problem: {e}")))?;
    let mode = config.controller.mode()?;
    let options = config
        .controller
        .options(mode, config.controller.open_loop_len, true);
    let mut plant = config.plant.build()?;
    let trace = run_controller_with(plant.as_mut(), &problem, &reference, &options)
        .map_err(|e| CliError::Solver(format!("closed loop failed: {e}")))?;
    if let Some(reason) = &trace.aborted {
        return Err(CliError::Solver(format!(
            "closed loop aborted after {} step(s): {reason}",
            trace.rows.len()
        )));
    }
    Ok((trace, face))
}

fn cmd_run(common: Common) -> Result<(), CliError> {
    let config = ExperimentConfig::load(&common.config)?;
    let dir = out_dir(common.out_dir)?;
    let (trace, _face) = run_configured(&config)?;
    let trace_path = dir.join("trace.csv");
    trace
        .write_csv(&trace_path)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", trace_path.display())))?;
    let summary = trace.summary(&config.position_channels);
    let summary_path = dir.join("summary.json");
    write_json(&summary, &summary_path)?;
    println!(
        "{} steps in mode {}: position rmse {:.6e}, {} fallback(s) -> {}, {}",
        summary.steps,
        summary.mode,
        summary.rmse_position,
        summary.fallback_count,
        trace_path.display(),
        summary_path.display()
    );
    Ok(())
}

fn cmd_bench(common: Common, open_loop_lens: Vec<usize>, timing: bool) -> Result<(), CliError> {
    let config = ExperimentConfig::load(&common.config)?;
    let dir = out_dir(common.out_dir)?;
    let outcome = run_benchmark(&config, &open_loop_lens, timing)?;

    let json_path = dir.join("report.json");
    write_json(&outcome.report, &json_path)?;
    let md_path = dir.join("report.md");
    std::fs::write(&md_path, outcome.report.to_markdown())
        .map_err(|e| CliError::Io(format!("writing {}: {e}", md_path.display())))?;
    for (mode, s, trace) in &outcome.traces {
        let path = dir.join(format!("trace_{mode}_s{s}.csv"));
        trace
            .write_csv(&path)
            .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    }
    let failed = outcome
        .report
        .rows
        .iter()
        .filter(|r| r.failed.is_some())
        .count();
    println!(
        "{} measurement(s), {} failed -> {}, {}",
        outcome.report.rows.len(),
        failed,
        json_path.display(),
        md_path.display()
    );
    // A benchmark that produced only failed rows still wrote its report,
    // but the invocation as a whole did not measure anything.
    if failed == outcome.report.rows.len() {
        return Err(CliError::Solver(
            "every benchmark row failed; see the report for reasons".into(),
        ));
    }
    Ok(())
}

fn cmd_plot_data(common: Common) -> Result<(), CliError> {
    let config = ExperimentConfig::load(&common.config)?;
    let dir = out_dir(common.out_dir)?;
    let (trace, face) = run_configured(&config)?;
    let written = write_plot_data(&trace, &config, face.as_ref(), &dir)?;
    println!(
        "wrote {}",
        written
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Collect(common) => cmd_collect(common),
        Command::Solve(common) => cmd_solve(common),
        Command::Run(common) => cmd_run(common),
        Command::Bench {
            common,
            open_loop_lens,
            timing,
        } => cmd_bench(common, open_loop_lens, timing),
        Command::PlotData(common) => cmd_plot_data(common),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
