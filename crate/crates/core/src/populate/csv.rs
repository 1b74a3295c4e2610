//! CSV columns as element arrays.
//!
//! [`csv_scan`] makes one pass over the file, recording the byte offset of
//! every `group`-th data row and inferring each column's numeric kind. A
//! [`CsvColumn`] then serves any row range by seeking to the nearest recorded
//! offset at or before the first row and parsing forward.
//!
//! Dialect: comma separator, double-quote quoting with `""` escapes, a header
//! row, one record per line (`\n` or `\r\n`). Quoted newlines are rejected
//! because they would make row offsets ambiguous. Blank lines are skipped.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use super::{Populate, PopulateError, PopulateRequest};
use crate::UfoConfig;

/// Rows per recorded offset.
pub const ROW_GROUP: usize = 1000;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("missing header row")]
    MissingHeader,
    #[error("no column named {0:?}")]
    NoSuchColumn(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    /// Every value parsed as a 64-bit integer.
    Integer,
    /// 64-bit float; unparsable cells read as NaN.
    Float,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvIndex {
    pub path: PathBuf,
    pub row_count: usize,
    pub columns: Vec<(String, ColumnKind)>,
    pub group: usize,
    /// Byte offset of rows 0, group, 2*group, ...
    pub offsets: Vec<u64>,
}

impl CsvIndex {
    pub fn column_index(&self, name: &str) -> Result<usize, CsvError> {
        self.columns
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CsvError::NoSuchColumn(name.into()))
    }
}

/// Split one line (without terminator) into fields.
pub(crate) fn split_record(line: &[u8]) -> Result<Vec<Vec<u8>>, String> {
    let mut fields = Vec::new();
    let mut i = 0;
    loop {
        let mut field = Vec::new();
        if line.get(i) == Some(&b'"') {
            i += 1;
            loop {
                match line.get(i) {
                    None => return Err("unterminated quoted field".into()),
                    Some(b'"') if line.get(i + 1) == Some(&b'"') => {
                        field.push(b'"');
                        i += 2;
                    }
                    Some(b'"') => {
                        i += 1;
                        break;
                    }
                    Some(&b) => {
                        field.push(b);
                        i += 1;
                    }
                }
            }
            match line.get(i) {
                None => {
                    fields.push(field);
                    return Ok(fields);
                }
                Some(b',') => i += 1,
                Some(_) => return Err("text after closing quote".into()),
            }
        } else {
            let end = line[i..].iter().position(|&b| b == b',').map(|p| i + p);
            match end {
                Some(end) => {
                    field.extend_from_slice(&line[i..end]);
                    i = end + 1;
                }
                None => {
                    field.extend_from_slice(&line[i..]);
                    fields.push(field);
                    return Ok(fields);
                }
            }
            if field.contains(&b'"') {
                return Err("quote inside unquoted field".into());
            }
        }
        fields.push(field);
    }
}

fn trim_line(buf: &mut Vec<u8>) {
    if buf.last() == Some(&b'\n') {
        buf.pop();
        if buf.last() == Some(&b'\r') {
            buf.pop();
        }
    }
}

/// Line reader that skips blank lines and reports each record's start offset.
struct Lines<R> {
    reader: R,
    offset: u64,
    line: usize,
    buf: Vec<u8>,
}

impl<R: BufRead> Lines<R> {
    fn new(reader: R, offset: u64) -> Self {
        Lines {
            reader,
            offset,
            line: 0,
            buf: Vec::new(),
        }
    }

    /// Next non-blank line as `(start offset, line number, bytes)`.
    fn next_record(&mut self) -> io::Result<Option<(u64, usize, &[u8])>> {
        loop {
            self.buf.clear();
            let n = self.reader.read_until(b'\n', &mut self.buf)?;
            if n == 0 {
                return Ok(None);
            }
            let start = self.offset;
            self.offset += n as u64;
            self.line += 1;
            trim_line(&mut self.buf);
            if !self.buf.is_empty() {
                return Ok(Some((start, self.line, &self.buf)));
            }
        }
    }
}

fn parse_int(text: &[u8]) -> Option<i64> {
    std::str::from_utf8(text).ok()?.trim().parse().ok()
}

fn parse_float(text: &[u8]) -> f64 {
    std::str::from_utf8(text)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(f64::NAN)
}

pub fn csv_scan(path: impl AsRef<Path>) -> Result<CsvIndex, CsvError> {
    csv_scan_with_group(path, ROW_GROUP)
}

pub fn csv_scan_with_group(path: impl AsRef<Path>, group: usize) -> Result<CsvIndex, CsvError> {
    assert!(group > 0, "row group must hold at least one row");
    let path = path.as_ref().to_path_buf();
    let mut lines = Lines::new(BufReader::new(File::open(&path)?), 0);
    let (_, _, header) = lines.next_record()?.ok_or(CsvError::MissingHeader)?;
    let names = split_record(header).map_err(|reason| CsvError::Malformed { line: 1, reason })?;
    let names: Vec<String> = names
        .into_iter()
        .map(|n| String::from_utf8_lossy(&n).into_owned())
        .collect();
    let mut integer = vec![true; names.len()];
    let mut offsets = Vec::new();
    let mut row_count = 0;
    while let Some((start, line_no, line)) = lines.next_record()? {
        let fields = split_record(line).map_err(|reason| CsvError::Malformed {
            line: line_no,
            reason,
        })?;
        if fields.len() != names.len() {
            return Err(CsvError::Malformed {
                line: line_no,
                reason: format!("{} fields, header has {}", fields.len(), names.len()),
            });
        }
        for (flag, field) in integer.iter_mut().zip(&fields) {
            if *flag && parse_int(field).is_none() {
                *flag = false;
            }
        }
        if row_count % group == 0 {
            offsets.push(start);
        }
        row_count += 1;
    }
    if offsets.is_empty() {
        offsets.push(lines.offset);
    }
    let columns = names
        .into_iter()
        .zip(integer)
        .map(|(n, int)| (n, if int { ColumnKind::Integer } else { ColumnKind::Float }))
        .collect();
    Ok(CsvIndex {
        path,
        row_count,
        columns,
        group,
        offsets,
    })
}

/// One column of a scanned file, as 8-byte elements (i64 or f64).
#[derive(Debug)]
pub struct CsvColumn {
    index: Arc<CsvIndex>,
    column: usize,
    seeks: AtomicU64,
}

impl CsvColumn {
    pub fn new(index: Arc<CsvIndex>, column: usize) -> Result<Self, CsvError> {
        if column >= index.columns.len() {
            return Err(CsvError::NoSuchColumn(format!("#{column}")));
        }
        Ok(CsvColumn {
            index,
            column,
            seeks: AtomicU64::new(0),
        })
    }

    pub fn kind(&self) -> ColumnKind {
        self.index.columns[self.column].1
    }

    pub fn len(&self) -> usize {
        self.index.row_count
    }

    pub fn is_empty(&self) -> bool {
        self.index.row_count == 0
    }

    /// Seeks performed so far.
    pub fn seeks(&self) -> u64 {
        self.seeks.load(Ordering::Relaxed)
    }

    pub fn config(self) -> UfoConfig {
        let n = self.len();
        UfoConfig::new(8, n, Arc::new(self))
    }
}

impl Populate for CsvColumn {
    fn populate(&self, request: &mut PopulateRequest<'_>) -> Result<(), PopulateError> {
        if request.is_empty() {
            return Ok(());
        }
        if request.end > self.index.row_count || request.element_size != 8 {
            return Err(PopulateError::Other(format!(
                "rows {}..{} of {} requested as {}-byte elements",
                request.start, request.end, self.index.row_count, request.element_size
            )));
        }
        let group = request.start / self.index.group;
        let offset = self.index.offsets[group];
        let mut file = File::open(&self.index.path)?;
        file.seek(SeekFrom::Start(offset))?;
        self.seeks.fetch_add(1, Ordering::Relaxed);
        let mut lines = Lines::new(BufReader::new(file), offset);
        let mut row = group * self.index.group;
        let kind = self.kind();
        let start = request.start;
        let end = request.end;
        let mut outputs = request.target.chunks_exact_mut(8);
        while row < end {
            let Some((_, _, line)) = lines.next_record()? else {
                return Err(PopulateError::Other(format!("file ends before row {row}")));
            };
            if row >= start {
                let fields = split_record(line).map_err(PopulateError::Other)?;
                let text = fields.get(self.column).ok_or_else(|| PopulateError::Parse {
                    row,
                    column: self.column,
                    text: String::new(),
                })?;
                let out = outputs.next().expect("target sized to the range");
                match kind {
                    ColumnKind::Integer => {
                        let v = parse_int(text).ok_or_else(|| PopulateError::Parse {
                            row,
                            column: self.column,
                            text: String::from_utf8_lossy(text).into_owned(),
                        })?;
                        out.copy_from_slice(&v.to_le_bytes());
                    }
                    ColumnKind::Float => out.copy_from_slice(&parse_float(text).to_le_bytes()),
                }
            }
            row += 1;
        }
        Ok(())
    }
}
