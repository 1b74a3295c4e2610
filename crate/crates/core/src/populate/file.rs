use std::fs::File;
use std::io;
use std::os::unix::fs::FileExt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{Populate, PopulateError, PopulateRequest};
use crate::UfoConfig;

/// Raw little-endian elements stored in a file starting at `base_offset`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileSpec {
    pub path: PathBuf,
    pub base_offset: u64,
    pub element_size: usize,
    pub element_count: usize,
}

impl FileSpec {
    /// Spec covering every whole element of the file after `base_offset`.
    pub fn whole_file(path: impl Into<PathBuf>, element_size: usize) -> io::Result<Self> {
        let path = path.into();
        let len = std::fs::metadata(&path)?.len();
        Ok(FileSpec {
            path,
            base_offset: 0,
            element_size,
            element_count: (len / element_size as u64) as usize,
        })
    }

    pub fn open(&self) -> io::Result<FilePopulate> {
        FilePopulate::open(self.clone())
    }

    pub fn config(&self) -> io::Result<UfoConfig> {
        Ok(UfoConfig::new(
            self.element_size,
            self.element_count,
            Arc::new(self.open()?),
        ))
    }
}

/// Reads elements with positioned reads; safe to share across threads.
#[derive(Debug)]
pub struct FilePopulate {
    spec: FileSpec,
    file: File,
    reads: AtomicU64,
}

impl FilePopulate {
    pub fn open(spec: FileSpec) -> io::Result<Self> {
        let file = File::open(&spec.path)?;
        let need = spec.base_offset + (spec.element_count * spec.element_size) as u64;
        let have = file.metadata()?.len();
        if have < need {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("{} holds {have} bytes, {need} needed", spec.path.display()),
            ));
        }
        Ok(FilePopulate {
            spec,
            file,
            reads: AtomicU64::new(0),
        })
    }

    pub fn spec(&self) -> &FileSpec {
        &self.spec
    }

    /// Number of positioned reads issued so far.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }
}

impl Populate for FilePopulate {
    fn populate(&self, request: &mut PopulateRequest<'_>) -> Result<(), PopulateError> {
        if request.is_empty() {
            return Ok(());
        }
        let offset = self.spec.base_offset + (request.start * self.spec.element_size) as u64;
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.file.read_exact_at(request.target, offset)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn int_file(n: i32) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for v in 0..n {
            f.write_all(&v.to_le_bytes()).unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn reads_requested_window() {
        let f = int_file(1024);
        let p = FileSpec::whole_file(f.path(), 4).unwrap().open().unwrap();
        assert_eq!(p.spec().element_count, 1024);
        let mut buf = vec![0u8; 40];
        p.populate(&mut PopulateRequest::new(10, 20, 4, &mut buf)).unwrap();
        // oracle: read the file directly
        let raw = std::fs::read(f.path()).unwrap();
        assert_eq!(&buf[..], &raw[40..80]);
        let vals: Vec<i32> = buf
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(vals, (10..20).collect::<Vec<_>>());
    }

    #[test]
    fn empty_range_does_not_read() {
        let f = int_file(8);
        let p = FileSpec::whole_file(f.path(), 4).unwrap().open().unwrap();
        let mut buf = vec![];
        p.populate(&mut PopulateRequest::new(8, 8, 4, &mut buf)).unwrap();
        assert_eq!(p.reads(), 0);
    }

    #[test]
    fn truncated_file_fails() {
        let f = int_file(16);
        let spec = FileSpec {
            path: f.path().into(),
            base_offset: 0,
            element_size: 4,
            element_count: 16,
        };
        let p = spec.open().unwrap();
        f.as_file().set_len(20).unwrap();
        let mut buf = vec![0u8; 64];
        assert!(matches!(
            p.populate(&mut PopulateRequest::new(0, 16, 4, &mut buf)),
            Err(PopulateError::Io(_))
        ));
        // opening against a file that is already too short is refused
        assert!(FileSpec {
            element_count: 100,
            ..spec
        }
        .open()
        .is_err());
    }

    #[test]
    fn base_offset_is_honoured() {
        let f = int_file(10);
        let p = FilePopulate::open(FileSpec {
            path: f.path().into(),
            base_offset: 8,
            element_size: 4,
            element_count: 8,
        })
        .unwrap();
        let mut buf = vec![0u8; 4];
        p.populate(&mut PopulateRequest::new(0, 1, 4, &mut buf)).unwrap();
        assert_eq!(i32::from_le_bytes(buf.try_into().unwrap()), 2);
    }
}
