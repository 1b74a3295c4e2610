use std::sync::Arc;

use super::{write_int_le, Populate, PopulateError, PopulateRequest};
use crate::UfoConfig;

/// Arithmetic sequence `from, from+by, ...` up to and including `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqSpec {
    pub from: i64,
    pub to: i64,
    pub by: i64,
}

impl SeqSpec {
    pub fn new(from: i64, to: i64, by: i64) -> Self {
        assert!(by != 0, "sequence step must be nonzero");
        SeqSpec { from, to, by }
    }

    pub fn len(&self) -> usize {
        let span = self.to as i128 - self.from as i128;
        let by = self.by as i128;
        if span != 0 && (span < 0) != (by < 0) {
            return 0;
        }
        (span / by + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, index: usize) -> i64 {
        self.from.wrapping_add(self.by.wrapping_mul(index as i64))
    }

    /// Object config holding the whole sequence as `element_size`-byte integers.
    pub fn config(&self, element_size: usize) -> UfoConfig {
        UfoConfig::new(
            element_size,
            self.len(),
            Arc::new(SeqPopulate {
                spec: *self,
            }),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SeqPopulate {
    pub spec: SeqSpec,
}

impl Populate for SeqPopulate {
    fn populate(&self, request: &mut PopulateRequest<'_>) -> Result<(), PopulateError> {
        let spec = self.spec;
        match request.element_size {
            4 => {
                for (i, out) in request.elements() {
                    out.copy_from_slice(&(spec.value(i) as i32).to_le_bytes());
                }
            }
            8 => {
                for (i, out) in request.elements() {
                    out.copy_from_slice(&spec.value(i).to_le_bytes());
                }
            }
            _ => {
                for (i, out) in request.elements() {
                    write_int_le(spec.value(i), out);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(spec: SeqSpec, e: usize, start: usize, end: usize) -> Vec<u8> {
        let mut buf = vec![0u8; (end - start) * e];
        SeqPopulate { spec }
            .populate(&mut PopulateRequest::new(start, end, e, &mut buf))
            .unwrap();
        buf
    }

    fn ints(bytes: &[u8]) -> Vec<i32> {
        bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    #[test]
    fn one_to_ten() {
        let s = SeqSpec::new(1, 10, 1);
        assert_eq!(s.len(), 10);
        assert_eq!(ints(&run(s, 4, 0, 10)), (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn empty_range_writes_nothing() {
        assert!(run(SeqSpec::new(1, 10, 1), 4, 3, 3).is_empty());
    }

    #[test]
    fn even_numbers_window() {
        assert_eq!(ints(&run(SeqSpec::new(0, 100, 2), 4, 5, 8)), vec![10, 12, 14]);
    }

    #[test]
    fn lengths() {
        assert_eq!(SeqSpec::new(10, 1, -1).len(), 10);
        assert_eq!(SeqSpec::new(1, 10, -1).len(), 0);
        assert_eq!(SeqSpec::new(0, 9, 3).len(), 4);
        assert_eq!(SeqSpec::new(5, 5, 7).len(), 1);
    }

    #[test]
    fn wide_and_narrow_elements() {
        let s = SeqSpec::new(-3, 3, 1);
        let b = run(s, 8, 0, 2);
        assert_eq!(i64::from_le_bytes(b[..8].try_into().unwrap()), -3);
        let b = run(s, 2, 0, 1);
        assert_eq!(i16::from_le_bytes(b[..2].try_into().unwrap()), -3);
    }
}
