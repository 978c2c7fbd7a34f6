use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("record `{id}`: {field} has {found} entries, expected {expected}")]
    DimensionMismatch {
        id: String,
        field: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("record `{id}`: label {label} outside [0, {num_classes})")]
    LabelOutOfRange {
        id: String,
        label: usize,
        num_classes: usize,
    },

    #[error("record `{id}`: non-finite value in {field}")]
    NonFiniteValue { id: String, field: &'static str },

    #[error("class {0} has no records")]
    EmptyClass(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("episode needs {needed} classes but dataset has {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("class {class} has {available} records, episode needs {needed}")]
    InsufficientRecords {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("length mismatch in {context}: expected {expected}, found {found}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite {quantity} at episode {episode} (seed {seed})")]
    NonFinite {
        quantity: &'static str,
        episode: usize,
        seed: u64,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            context,
            expected,
            found,
        })
    }
}
