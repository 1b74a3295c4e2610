//! Object geometry: where the header ends, where elements live, and how the
//! reserved range is cut into chunks.
//!
//! The reservation looks like this (offsets relative to the region base):
//!
//! ```text
//! 0          user_offset       body_start                      body_end   total
//! | front pad | header (H bytes) | e0 | e1 | ... | e(n-1)        | rear pad |
//! |<----- header chunk(s) ------>|<-- body chunk 0 -->|<-- body chunk 1 ...
//! ```
//!
//! `body_start` is always a multiple of the chunk size, so element 0 starts
//! exactly on a chunk boundary and header chunks never carry element bytes.

use std::fmt;

use thiserror::Error;

/// Default chunk size, 1 MiB.
pub const DEFAULT_CHUNK_SIZE: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("invalid object configuration: {0}")]
    InvalidConfig(String),
    #[error("offset {offset} outside reservation of {total} bytes")]
    OffsetOutOfRange { offset: usize, total: usize },
    #[error("element index {index} out of range for {count} elements")]
    IndexOutOfRange { index: usize, count: usize },
}

/// The four numbers that define an object's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub header_size: usize,
    pub element_size: usize,
    pub element_count: usize,
    pub chunk_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChunkKind {
    Header,
    Body,
}

/// One materializable window of the reservation.
///
/// `index` counts within its kind: body chunk 0 starts at `body_start`.
/// `elem_lo..elem_hi` lists every element whose bytes intersect the window,
/// so elements straddling a boundary are claimed by both neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChunkExtent {
    pub kind: ChunkKind,
    pub index: usize,
    pub byte_lo: usize,
    pub byte_hi: usize,
    pub elem_lo: usize,
    pub elem_hi: usize,
}

impl ChunkExtent {
    pub fn len(&self) -> usize {
        self.byte_hi - self.byte_lo
    }

    pub fn is_empty(&self) -> bool {
        self.byte_hi == self.byte_lo
    }

    pub fn contains(&self, offset: usize) -> bool {
        (self.byte_lo..self.byte_hi).contains(&offset)
    }

    pub fn is_header(&self) -> bool {
        self.kind == ChunkKind::Header
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UfoLayout {
    geometry: Geometry,
    page_size: usize,
    body_start: usize,
    total: usize,
}

fn round_up(value: usize, align: usize) -> Option<usize> {
    value.checked_add(align - 1).map(|v| v / align * align)
}

impl UfoLayout {
    pub fn compute(geometry: Geometry, page_size: usize) -> Result<Self, LayoutError> {
        let Geometry {
            header_size,
            element_size,
            element_count,
            chunk_size,
        } = geometry;
        if page_size == 0 || !page_size.is_power_of_two() {
            return Err(LayoutError::InvalidConfig(format!(
                "page size {page_size} is not a power of two"
            )));
        }
        if element_size == 0 {
            return Err(LayoutError::InvalidConfig("element size must be at least 1".into()));
        }
        if chunk_size == 0 || chunk_size % page_size != 0 {
            return Err(LayoutError::InvalidConfig(format!(
                "chunk size {chunk_size} is not a positive multiple of the page size {page_size}"
            )));
        }
        let too_large = || LayoutError::InvalidConfig("object does not fit the address space".into());
        let body_start = if header_size == 0 {
            0
        } else {
            round_up(header_size, chunk_size).ok_or_else(too_large)?
        };
        let body_bytes = element_count.checked_mul(element_size).ok_or_else(too_large)?;
        let body_end = body_start.checked_add(body_bytes).ok_or_else(too_large)?;
        let total = round_up(body_end, page_size).ok_or_else(too_large)?;
        if total > isize::MAX as usize {
            return Err(too_large());
        }
        Ok(UfoLayout {
            geometry,
            page_size,
            body_start,
            total,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn header_size(&self) -> usize {
        self.geometry.header_size
    }

    pub fn element_size(&self) -> usize {
        self.geometry.element_size
    }

    pub fn element_count(&self) -> usize {
        self.geometry.element_count
    }

    pub fn chunk_size(&self) -> usize {
        self.geometry.chunk_size
    }

    /// Offset of element 0 within the reservation.
    pub fn body_start(&self) -> usize {
        self.body_start
    }

    /// One past the last element byte.
    pub fn body_end(&self) -> usize {
        self.body_start + self.geometry.element_count * self.geometry.element_size
    }

    /// Offset where the header (the object as the host sees it) begins.
    pub fn user_offset(&self) -> usize {
        self.body_start - self.geometry.header_size
    }

    pub fn front_pad(&self) -> usize {
        self.user_offset()
    }

    /// Page-aligned size of the reservation.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn elements_per_chunk(&self) -> usize {
        (self.geometry.chunk_size / self.geometry.element_size).max(1)
    }

    pub fn header_chunks(&self) -> usize {
        self.body_start / self.geometry.chunk_size
    }

    pub fn body_chunks(&self) -> usize {
        (self.total - self.body_start).div_ceil(self.geometry.chunk_size)
    }

    pub fn chunk_count(&self) -> usize {
        self.header_chunks() + self.body_chunks()
    }

    /// Extent of the chunk at global position `slot` (header chunks first).
    pub fn chunk_at_slot(&self, slot: usize) -> Option<ChunkExtent> {
        let c = self.geometry.chunk_size;
        let byte_lo = slot.checked_mul(c)?;
        if byte_lo >= self.total {
            return None;
        }
        let byte_hi = (byte_lo + c).min(self.total);
        if byte_lo < self.body_start {
            return Some(ChunkExtent {
                kind: ChunkKind::Header,
                index: slot,
                byte_lo,
                byte_hi,
                elem_lo: 0,
                elem_hi: 0,
            });
        }
        let e = self.geometry.element_size;
        let rel_lo = byte_lo - self.body_start;
        let rel_hi = byte_hi - self.body_start;
        let n = self.geometry.element_count;
        Some(ChunkExtent {
            kind: ChunkKind::Body,
            index: rel_lo / c,
            byte_lo,
            byte_hi,
            elem_lo: (rel_lo / e).min(n),
            elem_hi: rel_hi.div_ceil(e).min(n),
        })
    }

    pub fn body_chunk(&self, index: usize) -> Option<ChunkExtent> {
        self.chunk_at_slot(self.header_chunks().checked_add(index)?)
    }

    pub fn chunk_of_offset(&self, offset: usize) -> Result<ChunkExtent, LayoutError> {
        if offset >= self.total {
            return Err(LayoutError::OffsetOutOfRange {
                offset,
                total: self.total,
            });
        }
        Ok(self
            .chunk_at_slot(offset / self.geometry.chunk_size)
            .expect("offset below total always has a chunk"))
    }

    /// Global position of the chunk in the reservation.
    pub fn slot_of(&self, extent: &ChunkExtent) -> usize {
        extent.byte_lo / self.geometry.chunk_size
    }

    pub fn chunks(&self) -> impl Iterator<Item = ChunkExtent> + '_ {
        (0..self.chunk_count()).filter_map(move |slot| self.chunk_at_slot(slot))
    }

    pub fn index_to_offset(&self, index: usize) -> Result<usize, LayoutError> {
        if index >= self.geometry.element_count {
            return Err(LayoutError::IndexOutOfRange {
                index,
                count: self.geometry.element_count,
            });
        }
        Ok(self.body_start + index * self.geometry.element_size)
    }

    pub fn offset_to_index(&self, offset: usize) -> Result<usize, LayoutError> {
        if offset < self.body_start || offset >= self.body_end() {
            return Err(LayoutError::OffsetOutOfRange {
                offset,
                total: self.total,
            });
        }
        Ok((offset - self.body_start) / self.geometry.element_size)
    }
}

impl fmt::Display for UfoLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "header {}B at {}, {} x {}B elements at {}, {} bytes reserved in {}B chunks",
            self.geometry.header_size,
            self.user_offset(),
            self.geometry.element_count,
            self.geometry.element_size,
            self.body_start,
            self.total,
            self.geometry.chunk_size
        )
    }
}
