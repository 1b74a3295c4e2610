//! Chunk-at-a-time processing over objects.

use std::marker::PhantomData;
use std::ops::Range;
use std::sync::Arc;

use crate::api::{Core, ObjectShared, UfoHandle};
use crate::element::Element;
use crate::error::{Result, UfoError};
use crate::populate::{Dependency, Populate, PopulateError, PopulateRequest};
use crate::service::in_populate_thread;

/// Contiguous element ranges, one per chunk, covering `0..n` exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    ranges: Vec<Range<usize>>,
}

impl ChunkPlan {
    pub fn new(element_count: usize, per_chunk: usize) -> Self {
        assert!(per_chunk > 0, "chunks must hold at least one element");
        let ranges = (0..element_count)
            .step_by(per_chunk)
            .map(|lo| lo..(lo + per_chunk).min(element_count))
            .collect();
        ChunkPlan { ranges }
    }

    /// Plan sized to the smallest chunk, in elements, among `handles`.
    pub fn for_handles(handles: &[&UfoHandle]) -> Self {
        let n = handles.first().map_or(0, |h| h.len());
        let per = handles
            .iter()
            .map(|h| h.layout().elements_per_chunk())
            .min()
            .unwrap_or(1);
        ChunkPlan::new(n, per)
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

struct Input {
    shared: Arc<ObjectShared>,
    body: usize,
}

/// Population function of a derived object. Inputs are declared as
/// dependencies, so they are resident before `populate` reads them.
struct MapPopulate<T, U, F> {
    inputs: Vec<Input>,
    f: F,
    _types: PhantomData<fn(&[T]) -> U>,
}

impl<T, U, F> Populate for MapPopulate<T, U, F>
where
    T: Element,
    U: Element,
    F: Fn(&[T]) -> U + Send + Sync + 'static,
{
    fn populate(&self, request: &mut PopulateRequest<'_>) -> std::result::Result<(), PopulateError> {
        for input in &self.inputs {
            input
                .shared
                .check()
                .map_err(|e| PopulateError::Dependency(e.to_string()))?;
        }
        let mut args = Vec::with_capacity(self.inputs.len());
        for (i, out) in request.elements() {
            args.clear();
            for input in &self.inputs {
                args.push(unsafe { T::read_ptr((input.body + i * T::SIZE) as *const u8) });
            }
            (self.f)(&args).write_le(out);
        }
        Ok(())
    }

    fn dependencies(&self, start: usize, end: usize) -> Vec<Dependency> {
        self.inputs
            .iter()
            .map(|input| Dependency {
                object: input.shared.id(),
                elements: start..end,
            })
            .collect()
    }
}

/// Create an object whose element `i` is `f(&[in_0[i], in_1[i], ...])`.
/// Nothing is computed until the result is accessed.
pub fn map_into_ufo<T, U, F>(core: &Core, inputs: &[&UfoHandle], f: F) -> Result<UfoHandle>
where
    T: Element,
    U: Element,
    F: Fn(&[T]) -> U + Send + Sync + 'static,
{
    let first = inputs
        .first()
        .ok_or_else(|| UfoError::InvalidConfig("map needs at least one input".into()))?;
    let n = first.len();
    for h in inputs {
        h.check()?;
        if h.element_size() != T::SIZE {
            return Err(UfoError::ElementSize {
                object: h.element_size(),
                requested: T::SIZE,
            });
        }
        if h.len() != n {
            return Err(UfoError::LengthMismatch(n, h.len()));
        }
    }
    let populate = MapPopulate::<T, U, F> {
        inputs: inputs
            .iter()
            .map(|h| Input {
                shared: h.shared().clone(),
                body: h.body_ptr() as usize,
            })
            .collect(),
        f,
        _types: PhantomData,
    };
    let config = crate::UfoConfig::new(U::SIZE, n, Arc::new(populate))
        .with_chunk_size(first.layout().chunk_size());
    core.create(config)
}

/// Fold every element in index order, one chunk at a time.
pub fn reduce_chunks<T, A>(handle: &UfoHandle, init: A, mut f: impl FnMut(A, T) -> A) -> Result<A>
where
    T: Element,
{
    if in_populate_thread() {
        return Err(UfoError::NestedAccess);
    }
    handle.check()?;
    if handle.element_size() != T::SIZE {
        return Err(UfoError::ElementSize {
            object: handle.element_size(),
            requested: T::SIZE,
        });
    }
    let base = handle.body_ptr() as *const u8;
    let mut acc = init;
    for range in ChunkPlan::for_handles(&[handle]).ranges() {
        for i in range.clone() {
            acc = f(acc, unsafe { T::read_ptr(base.add(i * T::SIZE)) });
        }
        handle.check()?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_covers_range_once() {
        for (n, k) in [(0, 3), (1, 1), (10, 3), (9, 3), (1000, 7)] {
            let plan = ChunkPlan::new(n, k);
            let flat: Vec<usize> = plan.ranges().iter().flat_map(|r| r.clone()).collect();
            assert_eq!(flat, (0..n).collect::<Vec<_>>());
            assert!(plan.ranges().iter().all(|r| !r.is_empty() && r.len() <= k));
        }
    }
}
