//! Experiment harness around the data-driven tracking controllers: data
//! collection, one-shot solves, closed-loop runs, mode-by-mode benchmarks,
//! and plot-ready exports, all driven by one JSON config.

pub mod bench;
pub mod collect;
pub mod config;
pub mod plotdata;

pub use config::CliError;
