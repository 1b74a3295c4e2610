use std::fs::File;
use std::io;
use std::os::unix::fs::{FileExt, MetadataExt};
use std::path::{Path, PathBuf};

use crate::layout::ChunkExtent;

/// Per-object write-back file. Chunk windows are stored verbatim at their
/// reservation offset, so the file is a sparse image of the object.
///
/// The file is created on the first write-back, already unlinked.
#[derive(Debug)]
pub struct ChunkCache {
    dir: PathBuf,
    size: usize,
    chunk_size: usize,
    file: Option<File>,
    present: Vec<bool>,
    bytes_written: u64,
}

impl ChunkCache {
    pub fn new(dir: impl Into<PathBuf>, size: usize, chunk_size: usize) -> Self {
        ChunkCache {
            dir: dir.into(),
            size,
            chunk_size,
            file: None,
            present: vec![false; size.div_ceil(chunk_size)],
            bytes_written: 0,
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn slot(&self, extent: &ChunkExtent) -> usize {
        extent.byte_lo / self.chunk_size
    }

    pub fn contains(&self, extent: &ChunkExtent) -> bool {
        self.present.get(self.slot(extent)).copied().unwrap_or(false)
    }

    pub fn read(&self, extent: &ChunkExtent) -> io::Result<Option<Vec<u8>>> {
        if !self.contains(extent) {
            return Ok(None);
        }
        let file = self.file.as_ref().expect("present chunks imply a file");
        let mut buf = vec![0u8; extent.len()];
        file.read_exact_at(&mut buf, extent.byte_lo as u64)?;
        Ok(Some(buf))
    }

    pub fn write(&mut self, extent: &ChunkExtent, bytes: &[u8]) -> io::Result<()> {
        if bytes.len() != extent.len() || extent.byte_hi > self.size {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "cache write does not match the chunk window",
            ));
        }
        if self.file.is_none() {
            let file = tempfile::tempfile_in(&self.dir)?;
            file.set_len(self.size as u64)?;
            self.file = Some(file);
        }
        let file = self.file.as_ref().expect("created above");
        file.write_all_at(bytes, extent.byte_lo as u64)?;
        let slot = self.slot(extent);
        self.present[slot] = true;
        self.bytes_written += bytes.len() as u64;
        Ok(())
    }

    pub fn cached_chunks(&self) -> usize {
        self.present.iter().filter(|p| **p).count()
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    /// Bytes the file occupies on disk (zero before the first write-back).
    pub fn allocated_bytes(&self) -> io::Result<u64> {
        match &self.file {
            None => Ok(0),
            Some(f) => Ok(f.metadata()?.blocks() * 512),
        }
    }

    pub fn file_len(&self) -> io::Result<u64> {
        match &self.file {
            None => Ok(0),
            Some(f) => Ok(f.metadata()?.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Geometry, UfoLayout};

    fn layout() -> UfoLayout {
        UfoLayout::compute(
            Geometry {
                header_size: 0,
                element_size: 4,
                element_count: 4096,
                chunk_size: 4096,
            },
            4096,
        )
        .unwrap()
    }

    #[test]
    fn fresh_cache_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout();
        let c = ChunkCache::new(dir.path(), l.total(), l.chunk_size());
        assert_eq!(c.read(&l.body_chunk(0).unwrap()).unwrap(), None);
        assert_eq!(c.allocated_bytes().unwrap(), 0);
        // unlinked on creation: nothing visible in the directory
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn write_then_read_without_bleed() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout();
        let mut c = ChunkCache::new(dir.path(), l.total(), l.chunk_size());
        let k1 = l.body_chunk(1).unwrap();
        let bytes: Vec<u8> = (0..4096).map(|i| (i % 253) as u8).collect();
        c.write(&k1, &bytes).unwrap();
        assert_eq!(c.read(&k1).unwrap().unwrap(), bytes);
        assert_eq!(c.read(&l.body_chunk(0).unwrap()).unwrap(), None);
        assert_eq!(c.read(&l.body_chunk(2).unwrap()).unwrap(), None);
        assert_eq!(c.cached_chunks(), 1);
        assert_eq!(c.file_len().unwrap(), l.total() as u64);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn rejects_mismatched_window() {
        let dir = tempfile::tempdir().unwrap();
        let l = layout();
        let mut c = ChunkCache::new(dir.path(), l.total(), l.chunk_size());
        assert!(c.write(&l.body_chunk(0).unwrap(), &[1, 2, 3]).is_err());
    }
}
