//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, DspError>;

/// Errors surfaced by pipeline primitives and backends.
#[derive(Debug, Error)]
pub enum DspError {
    /// Prompt rendering failed (bad template or unusable demo).
    #[error("render error: {0}")]
    Render(String),

    /// The mock LM script has no record matching the prompt.
    #[error("no script record matches the prompt; closest record: {closest}")]
    ScriptMiss {
        /// Description of the record with the most matching constraints.
        closest: String,
    },

    /// A backend does not support the requested capability (e.g. scoring).
    #[error("backend capability missing: {0}")]
    Capability(String),

    /// Transport-level failure talking to a remote backend, after retries.
    #[error("transport error for prompt {prompt_hash}: {message}")]
    Transport {
        /// Hex hash of the prompt that failed, for cache/trace lookup.
        prompt_hash: String,
        /// Underlying error description.
        message: String,
    },

    /// Cache storage failure (I/O or a conflicting write for an existing key).
    #[error("cache error: {0}")]
    Cache(String),

    /// Index construction failure (empty corpus, duplicate ids).
    #[error("index build error: {0}")]
    IndexBuild(String),

    /// A caller violated an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid run or backend configuration.
    #[error("config error: {0}")]
    Config(String),

    /// An annotation attempt failed with an error (not a filtered attempt).
    #[error("annotate attempt on example {index} failed: {source}")]
    AnnotateAttempt {
        /// Position of the training example in the input list.
        index: usize,
        #[source]
        source: Box<DspError>,
    },

    /// A cross-validation candidate's evaluate call failed.
    #[error("crossval candidate {index} failed: {source}")]
    CrossvalCandidate {
        /// Candidate set index.
        index: usize,
        #[source]
        source: Box<DspError>,
    },

    /// Every branch of a branched pipeline failed.
    #[error("all {attempted} branches failed; last error: {last}")]
    BranchExhausted {
        /// Number of branches attempted.
        attempted: usize,
        /// Description of the last branch failure.
        last: String,
    },

    /// File or directory I/O outside the cache.
    #[error("io error on {path}: {source}")]
    Io {
        /// Offending path.
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file (corpus, dataset, script, template).
    #[error("parse error in {path}: {message}")]
    Parse {
        /// Offending file.
        path: String,
        /// What went wrong.
        message: String,
    },
}

impl DspError {
    /// Wraps a filesystem error with its path.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        DspError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        DspError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
