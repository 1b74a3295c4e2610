//! The fault-service thread. It alone owns the backend, the object registry,
//! the residency ledger and the write-back caches; everything else talks to
//! it through [`Request`] messages.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::api::{ObjectInfo, ObjectShared, UfoHandle};
use crate::backend::{gettid, FaultBackend, FaultEvent, Next, Region, Waker};
use crate::config::{ResolvedParams, UfoConfig};
use crate::error::{Result, UfoError};
use crate::layout::{ChunkExtent, Geometry, UfoLayout};
use crate::populate::{Dependency, Populate, PopulateError, PopulateRequest};
use crate::stats::Counters;
use crate::store::{hash_window, ChunkCache, ChunkRecord, ResidencyLedger, WaterMarks};
use crate::ObjectId;

/// Dependency chains deeper than this are treated as cycles.
const MAX_DEPENDENCY_DEPTH: usize = 16;
/// Poll interval while a population call is outstanding.
const POPULATE_POLL: Duration = Duration::from_millis(20);

thread_local! {
    static IN_POPULATE: Cell<bool> = const { Cell::new(false) };
}

/// True on the thread that runs population functions.
pub(crate) fn in_populate_thread() -> bool {
    IN_POPULATE.with(Cell::get)
}

pub(crate) enum Request {
    Create {
        config: UfoConfig,
        reply: Sender<Result<UfoHandle>>,
    },
    Free {
        id: ObjectId,
        reply: Sender<Result<()>>,
    },
    /// Dematerialize one object, or everything when `id` is `None`.
    Evict {
        id: Option<ObjectId>,
        reply: Sender<Result<usize>>,
    },
    /// Evict oldest-first until resident bytes are at or below `target`.
    Collect {
        target: usize,
        reply: Sender<usize>,
    },
    Inspect {
        id: ObjectId,
        reply: Sender<Result<ObjectInfo>>,
    },
    /// Ledger contents, oldest first.
    Residency {
        reply: Sender<Vec<(ObjectId, usize)>>,
    },
    Shutdown {
        reply: Sender<()>,
    },
}

struct ObjectRecord {
    shared: Arc<ObjectShared>,
    populate: Arc<dyn Populate>,
    read_only: bool,
    layout: UfoLayout,
    region: Region,
    cache: ChunkCache,
    resident: HashSet<usize>,
}

enum Target {
    Chunk(ChunkExtent),
    /// Page past the layout total (only for zero-length layouts).
    Padding(usize),
}

struct Job {
    populate: Arc<dyn Populate>,
    start: usize,
    end: usize,
    element_size: usize,
    buf: Vec<u8>,
}

struct JobResult {
    buf: Vec<u8>,
    result: std::result::Result<(), PopulateError>,
}

/// Dedicated thread for population calls. Its thread id lets the service
/// recognise faults raised from inside a population function.
struct PopulateWorker {
    jobs: Option<Sender<Job>>,
    results: Receiver<JobResult>,
    tid: i32,
    handle: Option<JoinHandle<()>>,
}

impl PopulateWorker {
    fn spawn(waker: Waker) -> std::io::Result<Self> {
        let (job_tx, job_rx) = mpsc::channel::<Job>();
        let (res_tx, res_rx) = mpsc::channel();
        let (tid_tx, tid_rx) = mpsc::channel();
        let handle = thread::Builder::new()
            .name("ufo-populate".into())
            .spawn(move || {
                IN_POPULATE.with(|f| f.set(true));
                let _ = tid_tx.send(gettid());
                for mut job in job_rx {
                    let outcome = catch_unwind(AssertUnwindSafe(|| {
                        let mut req =
                            PopulateRequest::new(job.start, job.end, job.element_size, &mut job.buf);
                        job.populate.populate(&mut req)
                    }));
                    let result = outcome.unwrap_or_else(|panic| {
                        let msg = panic
                            .downcast_ref::<&str>()
                            .map(|s| s.to_string())
                            .or_else(|| panic.downcast_ref::<String>().cloned())
                            .unwrap_or_else(|| "unknown panic".into());
                        Err(PopulateError::Other(format!("population function panicked: {msg}")))
                    });
                    if res_tx.send(JobResult { buf: job.buf, result }).is_err() {
                        break;
                    }
                    waker.wake();
                }
            })?;
        let tid = tid_rx
            .recv()
            .map_err(|_| std::io::Error::other("populate thread exited during start-up"))?;
        Ok(PopulateWorker {
            jobs: Some(job_tx),
            results: res_rx,
            tid,
            handle: Some(handle),
        })
    }
}

impl Drop for PopulateWorker {
    fn drop(&mut self) {
        self.jobs.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

pub(crate) struct Service {
    backend: Box<dyn FaultBackend>,
    requests: Receiver<Request>,
    objects: HashMap<ObjectId, ObjectRecord>,
    by_base: BTreeMap<usize, ObjectId>,
    ledger: ResidencyLedger,
    marks: WaterMarks,
    default_chunk: usize,
    temp_dir: PathBuf,
    abort_on_failure: bool,
    counters: Arc<Counters>,
    waker: Waker,
    worker: PopulateWorker,
    pending: VecDeque<FaultEvent>,
    next_id: u64,
    stop_reply: Option<Sender<()>>,
    stopping: bool,
}

impl Service {
    pub(crate) fn new(
        backend: Box<dyn FaultBackend>,
        requests: Receiver<Request>,
        params: &ResolvedParams,
        counters: Arc<Counters>,
    ) -> Result<Self> {
        let waker = backend.waker();
        let worker = PopulateWorker::spawn(waker.clone())?;
        Ok(Service {
            backend,
            requests,
            objects: HashMap::new(),
            by_base: BTreeMap::new(),
            ledger: ResidencyLedger::new(),
            marks: params.marks,
            default_chunk: params.chunk_size,
            temp_dir: params.temp_dir.clone(),
            abort_on_failure: params.abort_on_populate_failure,
            counters,
            waker,
            worker,
            pending: VecDeque::new(),
            next_id: 1,
            stop_reply: None,
            stopping: false,
        })
    }

    pub(crate) fn run(mut self) {
        loop {
            self.drain_requests();
            if self.stopping {
                break;
            }
            if let Some(event) = self.pending.pop_front() {
                self.handle_fault(event);
                continue;
            }
            match self.backend.next_event(None) {
                Ok(Next::Fault(event)) => self.handle_fault(event),
                Ok(Next::Wakeup) | Ok(Next::Timeout) => {}
                Ok(Next::Shutdown) => {
                    self.drain_requests();
                    break;
                }
                Err(e) => {
                    log::error!("fault source failed, stopping service: {e}");
                    break;
                }
            }
        }
        self.teardown();
    }

    fn drain_requests(&mut self) {
        loop {
            match self.requests.try_recv() {
                Ok(req) => self.handle_request(req),
                Err(TryRecvError::Empty) => return,
                Err(TryRecvError::Disconnected) => {
                    self.stopping = true;
                    return;
                }
            }
        }
    }

    fn handle_request(&mut self, req: Request) {
        match req {
            Request::Create { config, reply } => {
                let _ = reply.send(self.create(config));
            }
            Request::Free { id, reply } => {
                let _ = reply.send(self.free(id));
            }
            Request::Evict { id, reply } => {
                let records = match id {
                    Some(id) if !self.objects.contains_key(&id) => {
                        let _ = reply.send(Err(UfoError::Freed(id)));
                        return;
                    }
                    Some(id) => self.ledger.remove_object(id),
                    None => self.ledger.drain_all(),
                };
                let n = records.len();
                for r in records {
                    self.dematerialize(r);
                }
                self.counters.set_resident(self.ledger.resident_bytes());
                let _ = reply.send(Ok(n));
            }
            Request::Collect { target, reply } => {
                let records = self.ledger.collect_down_to(target, 0);
                let n = records.len();
                if n > 0 {
                    self.counters.bump(&self.counters.collections);
                }
                for r in records {
                    self.dematerialize(r);
                }
                let resident = self.ledger.resident_bytes();
                self.counters.set_resident(resident);
                if n > 0 {
                    self.counters.note_collection_end(resident);
                }
                let _ = reply.send(n);
            }
            Request::Inspect { id, reply } => {
                let _ = reply.send(self.inspect(id));
            }
            Request::Residency { reply } => {
                let _ = reply.send(self.ledger.iter().map(|r| (r.object, r.slot)).collect());
            }
            Request::Shutdown { reply } => {
                self.stopping = true;
                self.stop_reply = Some(reply);
            }
        }
    }

    fn create(&mut self, config: UfoConfig) -> Result<UfoHandle> {
        let page = self.backend.page_size();
        let chunk_size = config.chunk_size.unwrap_or(self.default_chunk);
        let layout = UfoLayout::compute(
            Geometry {
                header_size: config.header_size,
                element_size: config.element_size,
                element_count: config.element_count,
                chunk_size,
            },
            page,
        )?;
        let region = self.backend.reserve(layout.total().max(page))?;
        let id = ObjectId(self.next_id);
        self.next_id += 1;
        let shared = Arc::new(ObjectShared::new(id));
        let handle = UfoHandle::new(shared.clone(), region.base(), layout, config.read_only);
        log::debug!("created object {id}: {layout}");
        self.by_base.insert(region.base(), id);
        self.objects.insert(
            id,
            ObjectRecord {
                shared,
                populate: config.populate,
                read_only: config.read_only,
                layout,
                region,
                cache: ChunkCache::new(&self.temp_dir, layout.total(), chunk_size),
                resident: HashSet::new(),
            },
        );
        Ok(handle)
    }

    fn free(&mut self, id: ObjectId) -> Result<()> {
        let Some(obj) = self.objects.remove(&id) else {
            return Err(UfoError::DoubleFree(id));
        };
        // Dropped without write-back: the cache goes away with the object.
        self.ledger.remove_object(id);
        self.by_base.remove(&obj.region.base());
        obj.shared.mark_freed();
        if let Err(e) = self.backend.release(&obj.region) {
            log::error!("releasing object {id}: {e}");
        }
        self.counters.set_resident(self.ledger.resident_bytes());
        Ok(())
    }

    fn inspect(&self, id: ObjectId) -> Result<ObjectInfo> {
        let obj = self.objects.get(&id).ok_or(UfoError::Freed(id))?;
        Ok(ObjectInfo {
            resident_chunks: obj.resident.len(),
            cached_chunks: obj.cache.cached_chunks(),
            cache_bytes_written: obj.cache.bytes_written(),
            cache_allocated_bytes: obj.cache.allocated_bytes()?,
            cache_file_len: obj.cache.file_len()?,
        })
    }

    fn resolve(&self, address: usize) -> Option<(ObjectId, Target)> {
        let (&base, &id) = self.by_base.range(..=address).next_back()?;
        let obj = &self.objects[&id];
        if !obj.region.contains(address) {
            return None;
        }
        let offset = address - base;
        match obj.layout.chunk_of_offset(offset) {
            Ok(extent) => Some((id, Target::Chunk(extent))),
            Err(_) => {
                let page = self.backend.page_size();
                Some((id, Target::Padding(offset / page * page)))
            }
        }
    }

    fn handle_fault(&mut self, event: FaultEvent) {
        self.counters.bump(&self.counters.faults);
        let Some((id, target)) = self.resolve(event.address) else {
            // A region freed while the fault was queued, or a stray address.
            log::warn!("fault at {:#x} belongs to no live object", event.address);
            return;
        };
        match target {
            Target::Padding(page_lo) => {
                let obj = &self.objects[&id];
                let page = self.backend.page_size();
                if let Err(e) = self.backend.install(&obj.region, page_lo, &vec![0u8; page]) {
                    log::error!("object {id}: installing padding: {e}");
                }
            }
            Target::Chunk(extent) => {
                let obj = &self.objects[&id];
                let slot = obj.layout.slot_of(&extent);
                if obj.resident.contains(&slot) {
                    // Another thread faulted on the same chunk before install.
                    if let Err(e) = self.backend.wake(&obj.region, extent.byte_lo, extent.len()) {
                        log::error!("object {id}: wake: {e}");
                    }
                    return;
                }
                self.bring_in(id, extent, 0, true);
            }
        }
    }

    /// Materialize one chunk, record it in the ledger, optionally collect,
    /// then install it. Bookkeeping precedes the install so that counters are
    /// current by the time the faulting thread resumes. Failures poison the
    /// object and leave zeros in place so that no thread stays blocked.
    fn bring_in(&mut self, id: ObjectId, extent: ChunkExtent, depth: usize, collect: bool) {
        let bytes = self.materialize(id, &extent, depth);
        let Some(obj) = self.objects.get_mut(&id) else {
            return;
        };
        let slot = obj.layout.slot_of(&extent);
        obj.resident.insert(slot);
        let digest = (!obj.read_only).then(|| hash_window(&bytes));
        if digest.is_some() {
            self.counters.bump(&self.counters.hash_calls);
        }
        let record = ChunkRecord {
            object: id,
            slot,
            byte_lo: extent.byte_lo,
            len: extent.len(),
            digest,
        };
        if let Err(e) = self.ledger.note_materialized(record) {
            log::error!("object {id}: {e}");
        }
        self.counters.bump(&self.counters.materializations);
        self.counters.set_resident(self.ledger.resident_bytes());
        if collect {
            self.collect();
        }
        let obj = &self.objects[&id];
        if let Err(e) = self.backend.install(&obj.region, extent.byte_lo, &bytes) {
            log::error!("object {id}: installing chunk {slot}: {e}");
            obj.shared.poison(format!("installing chunk {slot}: {e}"));
        }
    }

    /// Produce the bytes of one chunk window: cached bytes if present,
    /// otherwise population output.
    fn materialize(&mut self, id: ObjectId, extent: &ChunkExtent, depth: usize) -> Vec<u8> {
        let obj = &self.objects[&id];
        let mut window = vec![0u8; extent.len()];
        match obj.cache.read(extent) {
            Ok(Some(bytes)) => {
                self.counters.bump(&self.counters.cache_hits);
                return bytes;
            }
            Ok(None) => {}
            Err(e) => {
                self.population_failed(id, PopulateError::Io(e));
                return window;
            }
        }
        if extent.elem_lo >= extent.elem_hi {
            return window;
        }
        if !obj.shared.is_live() {
            return window;
        }
        let populate = obj.populate.clone();
        let layout = obj.layout;
        let deps = populate.dependencies(extent.elem_lo, extent.elem_hi);
        for dep in deps {
            if let Err(e) = self.ensure_resident(&dep, depth) {
                self.population_failed(id, e);
                return window;
            }
        }

        let e = layout.element_size();
        let staging = vec![0u8; (extent.elem_hi - extent.elem_lo) * e];
        match self.run_populate(populate, extent.elem_lo, extent.elem_hi, e, staging) {
            Ok(staging) => {
                // Staging starts at the first (possibly straddling) element.
                let staging_lo = layout.body_start() + extent.elem_lo * e;
                let skip = extent.byte_lo - staging_lo;
                let n = window.len().min(staging.len() - skip);
                window[..n].copy_from_slice(&staging[skip..skip + n]);
            }
            Err(err) => self.population_failed(id, err),
        }
        window
    }

    fn ensure_resident(&mut self, dep: &Dependency, depth: usize) -> std::result::Result<(), PopulateError> {
        if depth >= MAX_DEPENDENCY_DEPTH {
            return Err(PopulateError::Dependency("dependency chain too deep".into()));
        }
        let Some(obj) = self.objects.get(&dep.object) else {
            return Err(PopulateError::Dependency(format!("object {} was freed", dep.object)));
        };
        obj.shared
            .check()
            .map_err(|e| PopulateError::Dependency(e.to_string()))?;
        if dep.elements.is_empty() {
            return Ok(());
        }
        let layout = obj.layout;
        let lo = layout.index_to_offset(dep.elements.start);
        let hi = layout.index_to_offset(dep.elements.end - 1);
        let (lo, hi) = match (lo, hi) {
            (Ok(lo), Ok(hi)) => (lo, hi + layout.element_size() - 1),
            _ => {
                return Err(PopulateError::Dependency(format!(
                    "elements {:?} outside object {}",
                    dep.elements, dep.object
                )))
            }
        };
        let c = layout.chunk_size();
        for slot in lo / c..=hi / c {
            if self.objects[&dep.object].resident.contains(&slot) {
                continue;
            }
            let extent = layout.chunk_at_slot(slot).expect("slot inside layout");
            self.bring_in(dep.object, extent, depth + 1, false);
            self.objects[&dep.object]
                .shared
                .check()
                .map_err(|e| PopulateError::Dependency(e.to_string()))?;
        }
        Ok(())
    }

    /// Run one population call on the worker thread while continuing to
    /// receive faults. Faults from the worker itself are nested accesses:
    /// they are recorded as errors and answered with zero pages so the
    /// worker can finish.
    fn run_populate(
        &mut self,
        populate: Arc<dyn Populate>,
        start: usize,
        end: usize,
        element_size: usize,
        buf: Vec<u8>,
    ) -> std::result::Result<Vec<u8>, PopulateError> {
        self.counters.bump(&self.counters.populate_calls);
        let job = Job {
            populate,
            start,
            end,
            element_size,
            buf,
        };
        let sent = self.worker.jobs.as_ref().map(|tx| tx.send(job).is_ok());
        if sent != Some(true) {
            return Err(PopulateError::Other("population thread is gone".into()));
        }
        let mut nested: Option<PopulateError> = None;
        let mut scratch: Vec<(ObjectId, usize)> = Vec::new();
        let done = loop {
            match self.worker.results.try_recv() {
                Ok(r) => break r,
                Err(TryRecvError::Disconnected) => {
                    break JobResult {
                        buf: Vec::new(),
                        result: Err(PopulateError::Other("population thread died".into())),
                    }
                }
                Err(TryRecvError::Empty) => {}
            }
            match self.backend.next_event(Some(POPULATE_POLL)) {
                Ok(Next::Fault(ev)) if ev.thread == Some(self.worker.tid) => {
                    self.counters.bump(&self.counters.nested_faults);
                    log::error!("population function touched object memory at {:#x}", ev.address);
                    nested.get_or_insert(PopulateError::NestedAccess { address: ev.address });
                    self.unblock_nested(ev.address, &mut scratch);
                }
                Ok(Next::Fault(ev)) => self.pending.push_back(ev),
                Ok(Next::Wakeup) | Ok(Next::Timeout) => {}
                Ok(Next::Shutdown) => {
                    // The flag is sticky; block on the worker instead of spinning.
                    if let Ok(r) = self.worker.results.recv_timeout(POPULATE_POLL) {
                        break r;
                    }
                }
                Err(e) => {
                    log::error!("fault source error during population: {e}");
                    thread::sleep(POPULATE_POLL);
                }
            }
        };
        for (id, page_lo) in scratch {
            if let Some(obj) = self.objects.get(&id) {
                let slot = page_lo / obj.layout.chunk_size();
                if !obj.resident.contains(&slot) {
                    let page = self.backend.page_size();
                    if let Err(e) = self.backend.reclaim(&obj.region, page_lo, page) {
                        log::error!("object {id}: dropping scratch page: {e}");
                    }
                }
            }
        }
        // Anything queued while the worker ran is handled by the main loop.
        self.waker.wake();
        match (nested, done.result) {
            (Some(err), _) | (None, Err(err)) => Err(err),
            (None, Ok(())) => Ok(done.buf),
        }
    }

    fn unblock_nested(&mut self, address: usize, scratch: &mut Vec<(ObjectId, usize)>) {
        let Some((&base, &id)) = self.by_base.range(..=address).next_back() else {
            return;
        };
        let obj = &self.objects[&id];
        if !obj.region.contains(address) {
            return;
        }
        let page = self.backend.page_size();
        let page_lo = (address - base) / page * page;
        if self.backend.is_installed(&obj.region, page_lo) {
            let _ = self.backend.wake(&obj.region, page_lo, page);
            return;
        }
        match self.backend.install(&obj.region, page_lo, &vec![0u8; page]) {
            Ok(()) => scratch.push((id, page_lo)),
            Err(e) => log::error!("object {id}: unblocking nested access: {e}"),
        }
    }

    fn population_failed(&mut self, id: ObjectId, err: PopulateError) {
        log::error!("object {id}: population failed: {err}");
        if self.abort_on_failure {
            eprintln!("object {id}: population failed: {err}; aborting");
            std::process::abort();
        }
        if let Some(obj) = self.objects.get(&id) {
            obj.shared.poison(err.to_string());
        }
    }

    fn collect(&mut self) {
        // The newest chunk is kept so a faulting thread always makes progress.
        let evicted = self.ledger.maybe_collect(&self.marks, 1);
        if evicted.is_empty() {
            return;
        }
        self.counters.bump(&self.counters.collections);
        for record in evicted {
            self.dematerialize(record);
        }
        let resident = self.ledger.resident_bytes();
        self.counters.set_resident(resident);
        self.counters.note_collection_end(resident);
    }

    /// Write the chunk back if it changed since materialization, then drop
    /// its pages. The record has already left the ledger.
    fn dematerialize(&mut self, record: ChunkRecord) {
        let Some(obj) = self.objects.get_mut(&record.object) else {
            return;
        };
        let id = record.object;
        if let Some(before) = record.digest {
            let mut now = vec![0u8; record.len];
            match self.backend.snapshot(&obj.region, record.byte_lo, &mut now) {
                Ok(()) => {
                    self.counters.bump(&self.counters.hash_calls);
                    if hash_window(&now) != before {
                        let extent = obj
                            .layout
                            .chunk_at_slot(record.slot)
                            .expect("ledger slot inside layout");
                        match obj.cache.write(&extent, &now) {
                            Ok(()) => {
                                self.counters.bump(&self.counters.cache_writes);
                                self.counters
                                    .add(&self.counters.cache_bytes_written, record.len as u64);
                            }
                            Err(e) => {
                                log::error!("object {id}: write-back failed: {e}");
                                obj.shared.poison(format!("write-back failed: {e}"));
                            }
                        }
                    }
                }
                Err(e) => log::error!("object {id}: snapshot failed: {e}"),
            }
        }
        if let Err(e) = self.backend.reclaim(&obj.region, record.byte_lo, record.len) {
            log::error!("object {id}: reclaim failed: {e}");
        }
        obj.resident.remove(&record.slot);
        self.counters.bump(&self.counters.evictions);
    }

    fn teardown(&mut self) {
        let ids: Vec<ObjectId> = self.objects.keys().copied().collect();
        for id in ids {
            let _ = self.free(id);
        }
        self.pending.clear();
        // Fail any request that raced with shutdown.
        while let Ok(req) = self.requests.try_recv() {
            match req {
                Request::Create { reply, .. } => drop(reply.send(Err(UfoError::ShutDown))),
                Request::Free { reply, .. } => drop(reply.send(Err(UfoError::ShutDown))),
                Request::Evict { reply, .. } => drop(reply.send(Err(UfoError::ShutDown))),
                Request::Inspect { reply, .. } => drop(reply.send(Err(UfoError::ShutDown))),
                Request::Collect { reply, .. } => drop(reply.send(0)),
                Request::Residency { reply } => drop(reply.send(Vec::new())),
                Request::Shutdown { reply } => drop(reply.send(())),
            }
        }
        if let Some(reply) = self.stop_reply.take() {
            let _ = reply.send(());
        }
    }
}
