// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the engine.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the engine can report.
///
/// The variants are coarse on purpose: the command-line runner maps each
/// one to its own exit code, so adding a variant is a user-visible change.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Tensor shapes do not line up. `node` names the offending graph node
    /// or port when one is known.
    #[error("shape error{}: {message}", node.as_ref().map(|n| format!(" at `{n}`")).unwrap_or_default())]
    Shape {
        node: Option<String>,
        message: String,
    },

    /// The graph is not a valid DAG (cycle, dangling reference, duplicate name).
    #[error("structural error: {0}")]
    Structural(String),

    /// A leaf has no value, or the bound value has the wrong shape.
    #[error("binding error: {0}")]
    Binding(String),

    /// A computation produced a NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    /// The number of paths exceeds the configured cap.
    #[error("capacity exceeded: {count} paths exceed the cap of {cap}; select paths with patterns instead of enumerating them")]
    Capacity { count: u128, cap: usize },

    /// A pattern or hypothesis expression failed to parse.
    #[error("syntax error at column {column}: {message}\n  {input}\n  {caret:>width$}", caret = "^", width = column + 1)]
    Syntax {
        input: String,
        column: usize,
        message: String,
    },

    /// A binary or text container is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// A rewrite changed the graph's behavior on a probe input.
    #[error("rewrite verification failed for {rewrite}: max deviation {deviation:e} exceeds {tolerance:e}")]
    RewriteVerification {
        rewrite: String,
        deviation: f64,
        tolerance: f64,
    },

    /// A metric is undefined for the supplied data (e.g. a zero denominator).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// An experiment configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// I/O failure on `path`; a missing file maps to [`Error::FileNotFound`].
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        if err.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path.to_owned())
        } else {
            Error::Io(err)
        }
    }

    pub(crate) fn shape(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            node: Some(node.into()),
            message: message.into(),
        }
    }

    pub(crate) fn shape_anon(message: impl Into<String>) -> Self {
        Error::Shape {
            node: None,
            message: message.into(),
        }
    }

    /// Attach a node name to a shape error that does not carry one yet.
    pub(crate) fn at_node(self, name: &str) -> Self {
        match self {
            Error::Shape { node: None, message } => Error::Shape {
                node: Some(name.to_owned()),
                message,
            },
            other => other,
        }
    }
}
