//! Standard-library companion of `qnn-core`: model files, protocol
//! configuration, JSON reports and the `qnn` command line.

pub mod cli;
pub mod config;
pub mod io;
pub mod report;

pub use io::{
    decode_model, encode_model, inspect_records, load_model, load_model_file, save_model,
    save_model_file, FormatError, ModelIoError, RecordInfo,
};
