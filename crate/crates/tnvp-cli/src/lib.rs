//! Command implementations and config schema behind the `tnvp` binary.
//! Kept as a library so integration tests can drive commands directly.

pub mod commands;
pub mod config;

pub use config::RunConfig;

use tnvp_core::Error;

/// Process exit codes: 1 validation, 2 numerical, 3 I/O or file format.
pub fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Invalid(_)
        | Error::Parse { .. }
        | Error::EmptyDataset
        | Error::ShapeMismatch { .. } => 1,
        Error::NonFinite { .. } | Error::ScaleOverflow { .. } => 2,
        Error::Io(_)
        | Error::BadMagic
        | Error::UnsupportedVersion { .. }
        | Error::Truncated { .. } => 3,
        Error::InUnit { source, .. } => exit_code_for(source),
    }
}
