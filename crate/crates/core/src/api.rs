use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::backend::{self, BackendKind, Waker};
use crate::config::{CoreParams, UfoConfig};
use crate::element::Element;
use crate::error::{Result, UfoError};
use crate::layout::UfoLayout;
use crate::service::{in_populate_thread, Request, Service};
use crate::stats::{Counters, Stats};
use crate::store::WaterMarks;
use crate::ObjectId;

/// One core per process: the fault backend owns process-wide state.
static CORE_ACTIVE: AtomicBool = AtomicBool::new(false);

const LIVE: u8 = 0;
const POISONED: u8 = 1;
const FREED: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObjectStatus {
    Live,
    Poisoned(String),
    Freed,
}

/// State shared between the service thread and every handle clone.
#[derive(Debug)]
pub(crate) struct ObjectShared {
    id: ObjectId,
    state: AtomicU8,
    reason: Mutex<Option<String>>,
}

impl ObjectShared {
    pub(crate) fn new(id: ObjectId) -> Self {
        ObjectShared {
            id,
            state: AtomicU8::new(LIVE),
            reason: Mutex::new(None),
        }
    }

    pub(crate) fn id(&self) -> ObjectId {
        self.id
    }

    pub(crate) fn is_live(&self) -> bool {
        self.state.load(Ordering::Acquire) == LIVE
    }

    /// First error wins; later ones are only logged.
    pub(crate) fn poison(&self, reason: String) {
        let mut slot = self.reason.lock().unwrap_or_else(|p| p.into_inner());
        if slot.is_none() {
            *slot = Some(reason);
        }
        let _ = self
            .state
            .compare_exchange(LIVE, POISONED, Ordering::AcqRel, Ordering::Acquire);
    }

    pub(crate) fn mark_freed(&self) {
        self.state.store(FREED, Ordering::Release);
    }

    pub(crate) fn status(&self) -> ObjectStatus {
        match self.state.load(Ordering::Acquire) {
            LIVE => ObjectStatus::Live,
            FREED => ObjectStatus::Freed,
            _ => ObjectStatus::Poisoned(
                self.reason
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .clone()
                    .unwrap_or_default(),
            ),
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        match self.status() {
            ObjectStatus::Live => Ok(()),
            ObjectStatus::Freed => Err(UfoError::Freed(self.id)),
            ObjectStatus::Poisoned(reason) => Err(UfoError::Poisoned {
                object: self.id,
                reason,
            }),
        }
    }
}

/// Whether a write survives dematerialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteDurability {
    Persistent,
    /// The object is read-only: the write is visible until the chunk is
    /// evicted and is then lost.
    Volatile,
}

/// Per-object residency and cache figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectInfo {
    pub resident_chunks: usize,
    pub cached_chunks: usize,
    pub cache_bytes_written: u64,
    /// Disk blocks actually allocated to the cache file.
    pub cache_allocated_bytes: u64,
    pub cache_file_len: u64,
}

/// A created object. Cheap to clone; all clones refer to the same memory.
///
/// Accessors go through raw pointers into the reservation, so they fault
/// and block exactly like any other access to the object.
#[derive(Debug, Clone)]
pub struct UfoHandle {
    shared: Arc<ObjectShared>,
    base: usize,
    layout: UfoLayout,
    read_only: bool,
}

impl UfoHandle {
    pub(crate) fn new(shared: Arc<ObjectShared>, base: usize, layout: UfoLayout, read_only: bool) -> Self {
        UfoHandle {
            shared,
            base,
            layout,
            read_only,
        }
    }

    pub(crate) fn shared(&self) -> &Arc<ObjectShared> {
        &self.shared
    }

    pub fn id(&self) -> ObjectId {
        self.shared.id()
    }

    pub fn layout(&self) -> &UfoLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.layout.element_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn element_size(&self) -> usize {
        self.layout.element_size()
    }

    pub fn is_read_only(&self) -> bool {
        self.read_only
    }

    pub fn status(&self) -> ObjectStatus {
        self.shared.status()
    }

    /// Fails if the object is freed or poisoned.
    pub fn check(&self) -> Result<()> {
        self.shared.check()
    }

    /// Start of the caller-visible bytes (header, then body).
    pub fn header_ptr(&self) -> *mut u8 {
        (self.base + self.layout.user_offset()) as *mut u8
    }

    pub fn body_ptr(&self) -> *mut u8 {
        (self.base + self.layout.body_start()) as *mut u8
    }

    fn guard(&self) -> Result<()> {
        if in_populate_thread() {
            return Err(UfoError::NestedAccess);
        }
        self.shared.check()
    }

    fn element_ptr(&self, index: usize) -> Result<*mut u8> {
        if index >= self.len() {
            return Err(UfoError::OutOfRange {
                index,
                count: self.len(),
            });
        }
        Ok(unsafe { self.body_ptr().add(index * self.element_size()) })
    }

    fn expect_width(&self, width: usize) -> Result<()> {
        if width != self.element_size() {
            return Err(UfoError::ElementSize {
                object: self.element_size(),
                requested: width,
            });
        }
        Ok(())
    }

    /// Copy element `index` into `out`, which must be one element wide.
    pub fn read_into(&self, index: usize, out: &mut [u8]) -> Result<()> {
        self.guard()?;
        self.expect_width(out.len())?;
        let p = self.element_ptr(index)?;
        unsafe { std::ptr::copy_nonoverlapping(p, out.as_mut_ptr(), out.len()) };
        // Population may have failed while this thread was blocked.
        self.shared.check()
    }

    pub fn read(&self, index: usize) -> Result<Vec<u8>> {
        let mut out = vec![0u8; self.element_size()];
        self.read_into(index, &mut out)?;
        Ok(out)
    }

    pub fn write(&self, index: usize, bytes: &[u8]) -> Result<WriteDurability> {
        self.guard()?;
        self.expect_width(bytes.len())?;
        let p = self.element_ptr(index)?;
        unsafe { std::ptr::copy_nonoverlapping(bytes.as_ptr(), p, bytes.len()) };
        self.shared.check()?;
        Ok(self.durability())
    }

    pub fn get<T: Element>(&self, index: usize) -> Result<T> {
        self.guard()?;
        self.expect_width(T::SIZE)?;
        let v = unsafe { T::read_ptr(self.element_ptr(index)?) };
        self.shared.check()?;
        Ok(v)
    }

    pub fn set<T: Element>(&self, index: usize, value: T) -> Result<WriteDurability> {
        let mut buf = [0u8; 16];
        value.write_le(&mut buf[..T::SIZE]);
        self.write(index, &buf[..T::SIZE])
    }

    pub fn read_range<T: Element>(&self, range: Range<usize>) -> Result<Vec<T>> {
        self.guard()?;
        self.expect_width(T::SIZE)?;
        if range.start > range.end || range.end > self.len() {
            return Err(UfoError::OutOfRange {
                index: range.end,
                count: self.len(),
            });
        }
        let base = self.body_ptr();
        let out = range
            .map(|i| unsafe { T::read_ptr(base.add(i * T::SIZE)) })
            .collect();
        self.shared.check()?;
        Ok(out)
    }

    /// Header bytes, copied out.
    pub fn read_header(&self) -> Result<Vec<u8>> {
        self.guard()?;
        let n = self.layout.header_size();
        let mut out = vec![0u8; n];
        unsafe { std::ptr::copy_nonoverlapping(self.header_ptr(), out.as_mut_ptr(), n) };
        self.shared.check()?;
        Ok(out)
    }

    pub fn write_header(&self, bytes: &[u8]) -> Result<WriteDurability> {
        self.guard()?;
        if bytes.len() > self.layout.header_size() {
            return Err(UfoError::OutOfRange {
                index: bytes.len(),
                count: self.layout.header_size(),
            });
        }
        unsafe { std::ptr::copy_nonoverlapping(bytes.as_ptr(), self.header_ptr(), bytes.len()) };
        self.shared.check()?;
        Ok(self.durability())
    }

    fn durability(&self) -> WriteDurability {
        if self.read_only {
            WriteDurability::Volatile
        } else {
            WriteDurability::Persistent
        }
    }

    /// The body as a byte slice.
    ///
    /// # Safety
    /// The object must stay allocated while the slice is alive, and must not
    /// be written concurrently through another path.
    pub unsafe fn body_bytes(&self) -> &[u8] {
        std::slice::from_raw_parts(self.body_ptr(), self.len() * self.element_size())
    }
}

/// The running core: a fault backend plus its service thread.
///
/// Only one core may be active per process. Dropping it shuts it down.
pub struct Core {
    requests: Mutex<Option<Sender<Request>>>,
    waker: Waker,
    counters: Arc<Counters>,
    thread: Mutex<Option<JoinHandle<()>>>,
    backend: BackendKind,
    page_size: usize,
    chunk_size: usize,
    marks: WaterMarks,
    running: AtomicBool,
}

impl Core {
    pub fn init(params: CoreParams) -> Result<Core> {
        if CORE_ACTIVE
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(UfoError::AlreadyInitialized);
        }
        match Self::start(params) {
            Ok(core) => Ok(core),
            Err(e) => {
                CORE_ACTIVE.store(false, Ordering::Release);
                Err(e)
            }
        }
    }

    fn start(params: CoreParams) -> Result<Core> {
        let page_size = backend::system_page_size();
        let resolved = params.resolve(page_size)?;
        let backend = backend::open(resolved.backend)?;
        let kind = backend.kind();
        let waker = backend.waker();
        let counters = Arc::new(Counters::default());
        let (tx, rx) = mpsc::channel();
        let service = Service::new(backend, rx, &resolved, counters.clone())?;
        let thread = std::thread::Builder::new()
            .name("ufo-service".into())
            .spawn(move || service.run())?;
        log::info!(
            "core started: {kind:?} backend, chunk {} bytes, marks {}/{}",
            resolved.chunk_size,
            resolved.marks.high(),
            resolved.marks.low()
        );
        Ok(Core {
            requests: Mutex::new(Some(tx)),
            waker,
            counters,
            thread: Mutex::new(Some(thread)),
            backend: kind,
            page_size,
            chunk_size: resolved.chunk_size,
            marks: resolved.marks,
            running: AtomicBool::new(true),
        })
    }

    fn call<T>(&self, make: impl FnOnce(Sender<T>) -> Request) -> Result<T> {
        if in_populate_thread() {
            return Err(UfoError::NestedAccess);
        }
        let (tx, rx) = mpsc::channel();
        {
            let guard = self.requests.lock().unwrap_or_else(|p| p.into_inner());
            let sender = guard.as_ref().ok_or(UfoError::ShutDown)?;
            sender.send(make(tx)).map_err(|_| UfoError::ShutDown)?;
        }
        self.waker.wake();
        rx.recv().map_err(|_| UfoError::ShutDown)
    }

    pub fn create(&self, config: UfoConfig) -> Result<UfoHandle> {
        self.call(|reply| Request::Create { config, reply })?
    }

    /// Release the object's reservation and cache. Unsaved writes are dropped.
    pub fn free(&self, handle: &UfoHandle) -> Result<()> {
        self.free_id(handle.id())
    }

    pub fn free_id(&self, id: ObjectId) -> Result<()> {
        self.call(|reply| Request::Free { id, reply })?
    }

    /// Dematerialize every resident chunk of one object. Returns the count.
    pub fn evict(&self, handle: &UfoHandle) -> Result<usize> {
        let id = handle.id();
        self.call(|reply| Request::Evict { id: Some(id), reply })?
    }

    pub fn evict_all(&self) -> Result<usize> {
        self.call(|reply| Request::Evict { id: None, reply })?
    }

    /// Dematerialize the oldest chunks until at most `target` bytes remain
    /// resident. Returns the number of chunks evicted.
    pub fn collect_down_to(&self, target: usize) -> Result<usize> {
        self.call(|reply| Request::Collect { target, reply })
    }

    pub fn object_info(&self, handle: &UfoHandle) -> Result<ObjectInfo> {
        let id = handle.id();
        self.call(|reply| Request::Inspect { id, reply })?
    }

    /// Resident chunks as `(object, slot)`, oldest materialization first.
    pub fn residency(&self) -> Result<Vec<(ObjectId, usize)>> {
        self.call(|reply| Request::Residency { reply })
    }

    pub fn stats(&self) -> Stats {
        self.counters.snapshot()
    }

    /// Restart peak tracking from the current resident size.
    pub fn reset_peaks(&self) {
        self.counters.reset_peaks();
    }

    pub fn backend(&self) -> BackendKind {
        self.backend
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn marks(&self) -> WaterMarks {
        self.marks
    }

    /// Free every object and stop the service thread. Idempotent; later API
    /// calls fail with [`UfoError::ShutDown`].
    pub fn shutdown(&self) -> Result<()> {
        if !self.running.swap(false, Ordering::AcqRel) {
            return Ok(());
        }
        if in_populate_thread() {
            self.running.store(true, Ordering::Release);
            return Err(UfoError::NestedAccess);
        }
        let sender = self
            .requests
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .take();
        if let Some(sender) = sender {
            let (tx, rx) = mpsc::channel();
            if sender.send(Request::Shutdown { reply: tx }).is_ok() {
                self.waker.wake();
                let _ = rx.recv();
            }
        }
        self.waker.shutdown();
        if let Some(t) = self.thread.lock().unwrap_or_else(|p| p.into_inner()).take() {
            if t.join().is_err() {
                log::error!("service thread panicked");
            }
        }
        CORE_ACTIVE.store(false, Ordering::Release);
        log::info!("core shut down");
        Ok(())
    }
}

impl Drop for Core {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

impl std::fmt::Debug for Core {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Core")
            .field("backend", &self.backend)
            .field("chunk_size", &self.chunk_size)
            .field("marks", &self.marks)
            .finish_non_exhaustive()
    }
}
