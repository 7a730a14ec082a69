//! Experiment orchestration: perturbation sweeps, entropy reports and the
//! CSV/SVG they emit.

pub mod config;
pub mod prompts;
mod report;
mod svg;
mod sweep;

pub use report::{
    emit_report, entropy_report, sweep_csv, write_entropy_report, EntropyReport,
    ENTROPY_CSV_HEADER, SWEEP_CSV_HEADER,
};
pub use svg::grouped_bar_chart;
pub use sweep::{run_sweep, LayerPreset, RunRecord, SweepKind, SweepResult, SweepSpec};
