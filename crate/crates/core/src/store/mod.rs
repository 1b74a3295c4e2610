//! Residency accounting, eviction and the write-back cache.

mod cache;
mod digest;
mod ledger;

pub use cache::ChunkCache;
pub use digest::{hash_window, Digest};
pub use ledger::{ChunkRecord, LedgerError, ResidencyLedger, WaterMarks};
