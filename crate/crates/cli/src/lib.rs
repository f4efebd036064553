//! Command implementations behind the `spikeconv` binary.

use std::fmt;

pub mod args;
pub mod commands;
pub mod fixture;
pub mod tensorset;

/// Bad input data or configuration (exit code 2).
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// Missing or contradictory command-line options (exit code 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// Map an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if cause.is::<Invalid>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<spikeconv::Error>() {
            return if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            };
        }
        if cause.is::<serde_json::Error>() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_RUNTIME
}
