use std::sync::atomic::{AtomicU64, Ordering};

macro_rules! counters {
    ($($(#[$doc:meta])* $name:ident),* $(,)?) => {
        /// Live instrumentation counters, updated by the service thread.
        #[derive(Debug, Default)]
        pub struct Counters {
            $(pub(crate) $name: AtomicU64,)*
        }

        /// Point-in-time copy of [`Counters`].
        #[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
        pub struct Stats {
            $($(#[$doc])* pub $name: u64,)*
        }

        impl Counters {
            pub fn snapshot(&self) -> Stats {
                Stats {
                    $($name: self.$name.load(Ordering::Relaxed),)*
                }
            }
        }
    };
}

counters! {
    /// Population function invocations.
    populate_calls,
    /// BLAKE3 digests computed for dirty detection at dematerialization.
    hash_calls,
    /// Chunks written back to a cache file.
    cache_writes,
    cache_bytes_written,
    /// Chunks restored from a cache file instead of being populated.
    cache_hits,
    faults,
    materializations,
    evictions,
    /// Times the high water mark was crossed.
    collections,
    resident_bytes,
    peak_resident_bytes,
    /// Largest resident byte count observed at the end of a collection.
    max_resident_after_collection,
    nested_faults,
}

impl Counters {
    pub(crate) fn bump(&self, counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn add(&self, counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    pub(crate) fn set_resident(&self, bytes: usize) {
        let bytes = bytes as u64;
        self.resident_bytes.store(bytes, Ordering::Relaxed);
        self.peak_resident_bytes.fetch_max(bytes, Ordering::Relaxed);
    }

    pub(crate) fn note_collection_end(&self, bytes: usize) {
        self.max_resident_after_collection
            .fetch_max(bytes as u64, Ordering::Relaxed);
    }

    /// Reset the high-water style gauges so a new measurement window starts.
    pub(crate) fn reset_peaks(&self) {
        let now = self.resident_bytes.load(Ordering::Relaxed);
        self.peak_resident_bytes.store(now, Ordering::Relaxed);
        self.max_resident_after_collection.store(0, Ordering::Relaxed);
    }
}
