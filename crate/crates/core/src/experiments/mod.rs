//! Seeded parameter sweeps over the three schemes, CSV and SVG output, and
//! an invariant audit of the joint design.

mod config;
mod output;
mod sweep;
mod validate;

pub use config::{
    Distances, ExperimentConfig, PathLossConfig, PointSetup, SolverConfig, Sweep, SweepParam, ValidateConfig,
};
pub use output::{csv_string, emit_csv, emit_plot, svg_string, CSV_HEADER};
pub use sweep::{run_sweep, run_trial, SweepResult, SweepRow, TrialRecord};
pub use validate::{validate, AuditReport, Check, KKT_TOL};
