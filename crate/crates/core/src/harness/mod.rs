//! Experiment orchestration: parameter sweeps written to CSV and
//! sample-complexity measurement on top of them.

mod config;
mod pstar;
mod sweep;

pub use config::{ArchConfig, ExperimentConfig, GridConfig, Mode, PGrid, Relative, ResolvedGrid};
pub use pstar::{interpolate_crossing, measure_sample_complexity, summarize, CurvePoint, PStarEstimate};
pub use sweep::{
    cells, columns, header_comment, read_existing, run_cell, run_sweep, value_columns, Cell, SweepResult, SweepRow,
    SCHEMA_VERSION,
};
