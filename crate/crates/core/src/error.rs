use std::io;

use thiserror::Error;

use crate::backend::BackendError;
use crate::layout::LayoutError;
use crate::store::LedgerError;
use crate::ObjectId;

#[derive(Debug, Error)]
pub enum UfoError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("a core is already running in this process")]
    AlreadyInitialized,
    #[error("the core has been shut down")]
    ShutDown,
    #[error("object {0} was already freed")]
    DoubleFree(ObjectId),
    #[error("object {0} has been freed")]
    Freed(ObjectId),
    #[error("object {object} is poisoned: {reason}")]
    Poisoned { object: ObjectId, reason: String },
    #[error("element {index} out of range for {count} elements")]
    OutOfRange { index: usize, count: usize },
    #[error("element size mismatch: object stores {object} bytes, caller uses {requested}")]
    ElementSize { object: usize, requested: usize },
    #[error("inputs differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("object API called from inside a population function")]
    NestedAccess,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = UfoError> = std::result::Result<T, E>;
