//! File formats, dataset tooling and command implementations around
//! `stableseg-core`.

pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod gen;
pub mod infer;
pub mod params_io;
pub mod png_labels;
pub mod tensor;
pub mod tools;
pub mod toy;

/// Invalid flags or configuration; exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// A check ran and failed; exit code 3.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

/// Exit code for a command error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        EXIT_USAGE
    } else if err.chain().any(|e| e.is::<CheckFailed>()) {
        EXIT_CHECK
    } else {
        EXIT_DATA
    }
}
