//! Command-line orchestration of the generation, training, evaluation and
//! discovery pipeline.

pub mod config;
pub mod pipeline;

pub use config::{resolve, Ablation, RunConfig};

use fnoflow::Error;

/// Process exit status for an error category.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        Error::Verification(_) => 4,
        Error::Data(_) | Error::Io(_) | Error::Format { .. } | Error::Shape { .. } | Error::Invalid(_) | Error::Tape(_) => 2,
    }
}
