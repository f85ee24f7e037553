//! One-pass estimation of similarity self-join and join sizes over record
//! streams.
//!
//! A record is an ordered tuple of `d` byte-string fields. Two distinct
//! records are exactly `k`-similar when they agree on exactly `k` field
//! positions. The similarity self-join size at threshold `s` is
//! `g_s = sum_{k=s}^{d} x_k + n`, where `x_k` counts ordered exactly
//! `k`-similar pairs and the `+ n` accounts for each record joining itself.
//!
//! The estimator projects every record onto a sampled subset of its column
//! combinations at each size `k` in `s..=d`, feeds the encoded sub-values to
//! one Fast-AGMS sketch per size, reads back second frequency moments
//! `Y_s..Y_d`, and solves a triangular system to recover the pair counts.
//! Memory is independent of the stream length; the stream is read once.
//!
//! Modules:
//! - [`combinatorics`]: exact binomial coefficients, combination unranking.
//! - [`hashing`]: seed derivation, 4-universal hashing, fingerprints.
//! - [`sketch`]: Fast-AGMS sketch with serialization.
//! - [`subvalues`]: records, projection sampling, sub-value encoding.
//! - [`estimator`]: the streaming state, solvers, variance bounds.
//! - [`baselines`]: exact oracles, sampling baseline, synthetic generators.
//! - [`cli`]: the command-line front end.

pub mod baselines;
pub mod cli;
pub mod combinatorics;
pub mod estimator;
pub mod hashing;
pub mod sketch;
pub mod subvalues;

/// Crate-wide error type. `exit_code` groups variants per the CLI contract:
/// 1 usage, 2 input, 3 resource limit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter {param}={value}: {constraint}")]
    InvalidParameter {
        param: &'static str,
        value: String,
        constraint: &'static str,
    },
    #[error("record {record_index}: expected {expected} fields, got {got}")]
    Arity {
        expected: usize,
        got: usize,
        record_index: u64,
    },
    #[error("malformed {what}: {msg}")]
    Malformed { what: &'static str, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("integer overflow computing {what}")]
    Overflow { what: String },
    #[error("resource limit exceeded for {what}: {actual} > {limit}")]
    ResourceCap {
        what: &'static str,
        limit: u64,
        actual: u64,
    },
    #[error("incompatible operands: {what}")]
    Incompatible { what: String },
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter { .. } | Error::Incompatible { .. } => 1,
            Error::Arity { .. } | Error::Malformed { .. } | Error::Io(_) => 2,
            Error::Overflow { .. } | Error::ResourceCap { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
