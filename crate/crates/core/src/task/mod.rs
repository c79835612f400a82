//! Synthetic frame-labelling task and the four-condition evaluation
//! protocol: match, mismatch, quant and quant-all.

mod data;
mod eval;
mod protocol;
mod report;

pub use data::{generate_task, majority_accuracy, Dataset, Split, TaskParams, WINDOW};
pub use eval::{evaluate, evaluate_with_scale, frame_error, relative_loss, Condition};
pub use protocol::{
    assemble_report, run_job, run_protocol, run_protocol_with, Architecture, ProtocolConfig,
};
pub use report::{
    format_cell, format_params, format_relative, median, AverageRow, ConditionCells, JobOutcome,
    ProtocolReport, RelativeLosses, ReportRow, SeedFailure, SetResult,
};
