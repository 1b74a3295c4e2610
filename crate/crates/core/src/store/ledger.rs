use std::collections::{HashSet, VecDeque};

use thiserror::Error;

use super::Digest;
use crate::ObjectId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("water marks must satisfy 0 < low < high (got low={low}, high={high})")]
    InvalidMarks { high: usize, low: usize },
    #[error("chunk {slot} of object {object} is already resident")]
    Duplicate { object: ObjectId, slot: usize },
}

/// Resident-byte thresholds: exceeding `high` evicts down to `low`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaterMarks {
    high: usize,
    low: usize,
}

impl WaterMarks {
    pub const DEFAULT_HIGH: usize = 2 << 30;
    pub const DEFAULT_LOW: usize = 1 << 30;

    pub fn new(high: usize, low: usize) -> Result<Self, LedgerError> {
        if low == 0 || low >= high {
            return Err(LedgerError::InvalidMarks { high, low });
        }
        Ok(WaterMarks { high, low })
    }

    pub fn high(&self) -> usize {
        self.high
    }

    pub fn low(&self) -> usize {
        self.low
    }
}

impl Default for WaterMarks {
    fn default() -> Self {
        WaterMarks {
            high: Self::DEFAULT_HIGH,
            low: Self::DEFAULT_LOW,
        }
    }
}

/// One resident chunk. `digest` is `None` for read-only objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkRecord {
    pub object: ObjectId,
    pub slot: usize,
    pub byte_lo: usize,
    pub len: usize,
    pub digest: Option<Digest>,
}

/// Materialized chunks in materialization order, oldest at the head.
#[derive(Debug, Default)]
pub struct ResidencyLedger {
    queue: VecDeque<ChunkRecord>,
    members: HashSet<(ObjectId, usize)>,
    resident_bytes: usize,
}

impl ResidencyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn resident_bytes(&self) -> usize {
        self.resident_bytes
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn contains(&self, object: ObjectId, slot: usize) -> bool {
        self.members.contains(&(object, slot))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ChunkRecord> {
        self.queue.iter()
    }

    pub fn note_materialized(&mut self, record: ChunkRecord) -> Result<(), LedgerError> {
        if !self.members.insert((record.object, record.slot)) {
            return Err(LedgerError::Duplicate {
                object: record.object,
                slot: record.slot,
            });
        }
        self.resident_bytes += record.len;
        self.queue.push_back(record);
        Ok(())
    }

    fn pop_front(&mut self) -> Option<ChunkRecord> {
        let record = self.queue.pop_front()?;
        self.members.remove(&(record.object, record.slot));
        self.resident_bytes -= record.len;
        Some(record)
    }

    /// Apply the water-mark rule. When resident bytes exceed the high mark,
    /// pop records from the head until resident bytes are at or below the low
    /// mark, never touching the `keep_newest` most recent records. The caller
    /// dematerializes the returned records in order.
    pub fn maybe_collect(&mut self, marks: &WaterMarks, keep_newest: usize) -> Vec<ChunkRecord> {
        if self.resident_bytes <= marks.high {
            return Vec::new();
        }
        self.collect_down_to(marks.low, keep_newest)
    }

    /// Pop from the head until resident bytes are at or below `target`,
    /// regardless of the high mark.
    pub fn collect_down_to(&mut self, target: usize, keep_newest: usize) -> Vec<ChunkRecord> {
        let mut evicted = Vec::new();
        while self.resident_bytes > target && self.queue.len() > keep_newest {
            evicted.extend(self.pop_front());
        }
        evicted
    }

    /// Remove every record of `object`, oldest first.
    pub fn remove_object(&mut self, object: ObjectId) -> Vec<ChunkRecord> {
        let (gone, kept): (VecDeque<_>, VecDeque<_>) =
            self.queue.drain(..).partition(|r| r.object == object);
        self.queue = kept;
        for r in &gone {
            self.members.remove(&(r.object, r.slot));
            self.resident_bytes -= r.len;
        }
        gone.into()
    }

    /// Remove everything, oldest first.
    pub fn drain_all(&mut self) -> Vec<ChunkRecord> {
        self.members.clear();
        self.resident_bytes = 0;
        self.queue.drain(..).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: usize = 1 << 20;

    fn rec(object: u64, slot: usize, len: usize) -> ChunkRecord {
        ChunkRecord {
            object: ObjectId(object),
            slot,
            byte_lo: slot * len,
            len,
            digest: None,
        }
    }

    #[test]
    fn marks_validate() {
        assert!(WaterMarks::new(4, 2).is_ok());
        assert!(WaterMarks::new(2, 2).is_err());
        assert!(WaterMarks::new(2, 0).is_err());
        assert!(WaterMarks::new(1, 3).is_err());
    }

    #[test]
    fn note_and_order() {
        let mut l = ResidencyLedger::new();
        l.note_materialized(rec(1, 0, MIB)).unwrap();
        assert_eq!(l.resident_bytes(), MIB);
        l.note_materialized(rec(1, 1, MIB)).unwrap();
        assert_eq!(l.iter().next().unwrap().slot, 0);
        assert_eq!(
            l.note_materialized(rec(1, 1, MIB)),
            Err(LedgerError::Duplicate {
                object: ObjectId(1),
                slot: 1
            })
        );
    }

    #[test]
    fn collect_evicts_oldest_down_to_low() {
        let mut l = ResidencyLedger::new();
        for s in 0..5 {
            l.note_materialized(rec(1, s, MIB)).unwrap();
        }
        let marks = WaterMarks::new(4 * MIB, 2 * MIB).unwrap();
        let out = l.maybe_collect(&marks, 0);
        assert_eq!(out.iter().map(|r| r.slot).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(l.resident_bytes(), 2 * MIB);
    }

    #[test]
    fn below_high_is_noop() {
        let mut l = ResidencyLedger::new();
        l.note_materialized(rec(1, 0, MIB)).unwrap();
        let marks = WaterMarks::new(4 * MIB, 2 * MIB).unwrap();
        assert!(l.maybe_collect(&marks, 0).is_empty());
        assert_eq!(l.resident_bytes(), MIB);
    }

    #[test]
    fn degenerate_marks_evict_everything() {
        let mut l = ResidencyLedger::new();
        l.note_materialized(rec(1, 0, MIB)).unwrap();
        let marks = WaterMarks::new(2, 1).unwrap();
        assert_eq!(l.maybe_collect(&marks, 0).len(), 1);
        assert_eq!(l.resident_bytes(), 0);
    }

    #[test]
    fn pinned_newest_survives() {
        let mut l = ResidencyLedger::new();
        l.note_materialized(rec(1, 0, MIB)).unwrap();
        l.note_materialized(rec(1, 1, MIB)).unwrap();
        let marks = WaterMarks::new(2, 1).unwrap();
        let out = l.maybe_collect(&marks, 1);
        assert_eq!(out.len(), 1);
        assert!(l.contains(ObjectId(1), 1));
    }

    proptest::proptest! {
        #[test]
        fn collect_matches_replay(
            lens in proptest::collection::vec(1usize..8, 0..40),
            high in 2usize..40,
            low_frac in 0.0f64..1.0,
        ) {
            let low = 1 + ((high - 1) as f64 * low_frac) as usize % (high - 1);
            let marks = WaterMarks::new(high, low).unwrap();
            let mut l = ResidencyLedger::new();
            let mut oracle: VecDeque<(usize, usize)> = VecDeque::new();
            for (slot, &len) in lens.iter().enumerate() {
                l.note_materialized(rec(1, slot, len)).unwrap();
                oracle.push_back((slot, len));
                let evicted = l.maybe_collect(&marks, 0);
                let mut sum: usize = oracle.iter().map(|r| r.1).sum();
                let mut expect = Vec::new();
                if sum > high {
                    while sum > low {
                        let (s, n) = oracle.pop_front().unwrap();
                        sum -= n;
                        expect.push(s);
                    }
                }
                proptest::prop_assert_eq!(evicted.iter().map(|r| r.slot).collect::<Vec<_>>(), expect);
                proptest::prop_assert_eq!(l.resident_bytes(), sum);
                proptest::prop_assert_eq!(l.resident_bytes(), l.iter().map(|r| r.len).sum::<usize>());
                proptest::prop_assert!(l.resident_bytes() <= high);
            }
        }
    }

    #[test]
    fn remove_object_keeps_others_in_order() {
        let mut l = ResidencyLedger::new();
        l.note_materialized(rec(1, 0, 10)).unwrap();
        l.note_materialized(rec(2, 0, 20)).unwrap();
        l.note_materialized(rec(1, 1, 10)).unwrap();
        l.note_materialized(rec(2, 1, 20)).unwrap();
        let gone = l.remove_object(ObjectId(1));
        assert_eq!(gone.len(), 2);
        assert_eq!(l.resident_bytes(), 40);
        let left: Vec<_> = l.iter().map(|r| (r.object.0, r.slot)).collect();
        assert_eq!(left, vec![(2, 0), (2, 1)]);
        assert!(!l.contains(ObjectId(1), 0));
        assert_eq!(l.drain_all().len(), 2);
        assert_eq!(l.resident_bytes(), 0);
    }
}
