//! Population functions and the four stock back-ends.
//!
//! A population function fills the bytes of elements `[start, end)` into a
//! caller-provided buffer. It may be asked for any range, in any order, any
//! number of times, so it must be deterministic and idempotent. It runs on the
//! core's populate thread and must not touch memory of any object that is not
//! already resident.

mod csv;
mod file;
mod fill;
mod seq;

use std::io;
use std::ops::Range;

use thiserror::Error;

use crate::ObjectId;

pub use self::csv::{csv_scan, csv_scan_with_group, ColumnKind, CsvColumn, CsvError, CsvIndex, ROW_GROUP};
pub use self::file::{FilePopulate, FileSpec};
pub use self::fill::{FillPopulate, FillSpec};
pub use self::seq::{SeqPopulate, SeqSpec};

#[derive(Debug, Error)]
pub enum PopulateError {
    #[error("population function returned status {0}")]
    Status(i32),
    #[error("i/o error while populating: {0}")]
    Io(#[from] io::Error),
    #[error("cannot parse {text:?} at row {row}, column {column}")]
    Parse {
        row: usize,
        column: usize,
        text: String,
    },
    #[error("population function touched unmaterialized object memory at {address:#x}")]
    NestedAccess { address: usize },
    #[error("dependency unavailable: {0}")]
    Dependency(String),
    #[error("{0}")]
    Other(String),
}

impl PopulateError {
    /// Map a C-style status (0 = success) onto a result.
    pub fn check_status(status: i32) -> Result<(), PopulateError> {
        if status == 0 {
            Ok(())
        } else {
            Err(PopulateError::Status(status))
        }
    }
}

/// One population call: elements `[start, end)` into `target`, which holds
/// exactly `(end - start) * element_size` bytes.
#[derive(Debug)]
pub struct PopulateRequest<'a> {
    pub start: usize,
    pub end: usize,
    pub element_size: usize,
    pub target: &'a mut [u8],
}

impl<'a> PopulateRequest<'a> {
    pub fn new(start: usize, end: usize, element_size: usize, target: &'a mut [u8]) -> Self {
        assert!(start <= end, "populate range {start}..{end} is reversed");
        assert_eq!(
            target.len(),
            (end - start) * element_size,
            "populate target is not sized to the range"
        );
        PopulateRequest {
            start,
            end,
            element_size,
            target,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// `(element index, element bytes)` pairs over the target.
    pub fn elements(&mut self) -> impl Iterator<Item = (usize, &mut [u8])> + '_ {
        let start = self.start;
        self.target
            .chunks_exact_mut(self.element_size.max(1))
            .enumerate()
            .map(move |(k, bytes)| (start + k, bytes))
    }
}

/// Elements of another object that must be resident before a populate call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dependency {
    pub object: ObjectId,
    pub elements: Range<usize>,
}

pub trait Populate: Send + Sync {
    fn populate(&self, request: &mut PopulateRequest<'_>) -> Result<(), PopulateError>;

    /// Input ranges the core materializes before calling [`Populate::populate`]
    /// for `[start, end)`. Derived objects use this to read their inputs
    /// without faulting.
    fn dependencies(&self, _start: usize, _end: usize) -> Vec<Dependency> {
        Vec::new()
    }
}

impl<F> Populate for F
where
    F: Fn(&mut PopulateRequest<'_>) -> Result<(), PopulateError> + Send + Sync,
{
    fn populate(&self, request: &mut PopulateRequest<'_>) -> Result<(), PopulateError> {
        self(request)
    }
}

/// Encode `value` little-endian into `out`, truncating to `out.len()` bytes.
pub(crate) fn write_int_le(value: i64, out: &mut [u8]) {
    let bytes = value.to_le_bytes();
    let n = out.len().min(8);
    out[..n].copy_from_slice(&bytes[..n]);
    // sign-extend wider elements
    let fill = if value < 0 { 0xff } else { 0 };
    out[n..].fill(fill);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closures_are_population_functions() {
        let f = |req: &mut PopulateRequest<'_>| {
            for (i, bytes) in req.elements() {
                bytes.copy_from_slice(&(i as u32).to_le_bytes());
            }
            Ok(())
        };
        let mut buf = vec![0u8; 12];
        f.populate(&mut PopulateRequest::new(5, 8, 4, &mut buf)).unwrap();
        assert_eq!(buf, [5, 0, 0, 0, 6, 0, 0, 0, 7, 0, 0, 0]);
        assert!(f.dependencies(0, 3).is_empty());
    }

    #[test]
    fn status_mapping() {
        assert!(PopulateError::check_status(0).is_ok());
        assert!(matches!(
            PopulateError::check_status(3),
            Err(PopulateError::Status(3))
        ));
    }

    #[test]
    #[should_panic(expected = "not sized")]
    fn request_size_is_checked() {
        let mut buf = vec![0u8; 3];
        let _ = PopulateRequest::new(0, 1, 4, &mut buf);
    }

    #[test]
    fn int_encoding_truncates_and_extends() {
        let mut b = [0u8; 2];
        write_int_le(0x1_0203, &mut b);
        assert_eq!(b, [3, 2]);
        let mut b = [0u8; 16];
        write_int_le(-2, &mut b);
        assert!(b.iter().skip(1).all(|&x| x == 0xff));
        assert_eq!(b[0], 0xfe);
    }
}
