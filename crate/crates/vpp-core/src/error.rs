//! Error type shared by every module in the crate.
//!
//! Errors fall into three groups that the CLI maps onto process exit codes:
//! configuration problems (exit 2), numerical failures such as non-finite
//! values or a failed gradient check (exit 3), and I/O problems (also 2,
//! since they are almost always bad paths given on the command line).

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, VppError>;

/// All failure modes surfaced by the library.
#[derive(Debug)]
pub enum VppError {
    /// Operands have incompatible shapes (matrix products, mask lengths, ...).
    Shape(String),
    /// A value is outside the domain of an operation (e.g. `log` of a
    /// non-positive Gumbel score, a top-k fraction that selects zero patches).
    Domain(String),
    /// A configuration file or field is invalid or inconsistent.
    Config(String),
    /// A numerical check failed: non-finite intermediate, diverging loss,
    /// or a gradient check outside tolerance.
    Numerical(String),
    /// Reading or writing an artifact failed.
    Io(std::io::Error),
    /// A serialized artifact (snapshot, scenario, config) could not be parsed.
    Parse(String),
}

impl fmt::Display for VppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VppError::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            VppError::Domain(msg) => write!(f, "domain error: {msg}"),
            VppError::Config(msg) => write!(f, "config error: {msg}"),
            VppError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            VppError::Io(err) => write!(f, "i/o error: {err}"),
            VppError::Parse(msg) => write!(f, "parse error: {msg}"),
        }
    }
}

impl std::error::Error for VppError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            VppError::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for VppError {
    fn from(err: std::io::Error) -> Self {
        VppError::Io(err)
    }
}

impl VppError {
    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            VppError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_partition_error_classes() {
        assert_eq!(VppError::Config("x".into()).exit_code(), 2);
        assert_eq!(VppError::Shape("x".into()).exit_code(), 2);
        assert_eq!(VppError::Parse("x".into()).exit_code(), 2);
        assert_eq!(VppError::Numerical("x".into()).exit_code(), 3);
    }

    #[test]
    fn display_is_prefixed_by_class() {
        let msg = format!("{}", VppError::Domain("negative score".into()));
        assert!(msg.starts_with("domain error:"));
        assert!(msg.contains("negative score"));
    }
}
