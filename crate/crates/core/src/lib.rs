//! Objects whose contents are produced on demand by a population function.
//!
//! An object is a contiguous virtual range that reads like an ordinary
//! array. The first access to any chunk of it is trapped, the chunk is filled
//! by the object's [`Populate`] implementation (or restored from the object's
//! write-back cache), and the faulting thread resumes. Resident chunks are
//! tracked in materialization order and dematerialized oldest first whenever
//! the resident total crosses the high water mark.
//!
//! ```no_run
//! use ufo_core::{Core, CoreParams, SeqSpec};
//!
//! let core = Core::init(CoreParams::default())?;
//! let seq = core.create(SeqSpec::new(1, 1_000_000, 1).config(4))?;
//! let total = ufo_core::reduce_chunks(&seq, 0i64, |acc, v: i32| acc + v as i64)?;
//! assert_eq!(total, 500_000_500_000);
//! # Ok::<(), ufo_core::UfoError>(())
//! ```

use std::fmt;

pub mod api;
pub mod backend;
pub mod chunked;
pub mod config;
pub mod element;
pub mod error;
pub mod layout;
pub mod populate;
pub mod stats;
pub mod store;

mod service;

pub use api::{Core, ObjectInfo, ObjectStatus, UfoHandle, WriteDurability};
pub use backend::{BackendChoice, BackendKind, FaultBackend};
pub use chunked::{map_into_ufo, reduce_chunks, ChunkPlan};
pub use config::{parse_size, CoreParams, UfoConfig};
pub use element::Element;
pub use error::{Result, UfoError};
pub use layout::{ChunkExtent, ChunkKind, Geometry, UfoLayout, DEFAULT_CHUNK_SIZE};
pub use populate::{
    csv_scan, CsvColumn, CsvIndex, Dependency, FilePopulate, FileSpec, FillPopulate, FillSpec,
    Populate, PopulateError, PopulateRequest, SeqPopulate, SeqSpec,
};
pub use stats::Stats;
pub use store::{hash_window, Digest, WaterMarks};

/// Identifies an object for the lifetime of a core. Never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId(pub u64);

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}
