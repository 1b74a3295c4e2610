//! OS-facing fault delivery.
//!
//! A backend reserves address ranges that fault on first touch, reports those
//! faults as [`FaultEvent`]s, copies populated bytes into faulted pages and
//! hands pages back to the kernel. Two implementations exist:
//!
//! * [`UffdBackend`]: Linux `userfaultfd(2)` in missing-page mode.
//! * [`TrapBackend`]: `mprotect` plus a `SIGSEGV` handler over a memfd, for
//!   kernels or sandboxes that refuse userfaultfd.
//!
//! All methods except [`Waker`] are meant to be driven by one service thread.
//! Any other thread touching a reserved, unpopulated page blocks until that
//! thread installs it.

mod pages;
mod trap;
mod uffd;

use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

pub use trap::TrapBackend;
pub use uffd::UffdBackend;

pub(crate) use pages::PageMap;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{op} failed: {source}")]
    Os {
        op: &'static str,
        #[source]
        source: io::Error,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("region {0} is not registered")]
    NotRegistered(u64),
    #[error("fault backend unavailable: {0}")]
    Unavailable(String),
}

impl BackendError {
    pub(crate) fn last_os(op: &'static str) -> Self {
        BackendError::Os {
            op,
            source: io::Error::last_os_error(),
        }
    }
}

pub type Result<T, E = BackendError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Userfault,
    Trap,
}

/// Which backend to start. `Auto` tries userfaultfd and falls back to traps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackendChoice {
    Userfault,
    Trap,
    #[default]
    Auto,
}

impl std::str::FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "userfault" | "uffd" | "userfaultfd" => Ok(BackendChoice::Userfault),
            "trap" | "mprotect" => Ok(BackendChoice::Trap),
            "auto" => Ok(BackendChoice::Auto),
            other => Err(format!("unknown backend {other:?} (expected userfault, trap or auto)")),
        }
    }
}

/// A reserved address range. Cheap to copy; the backend owns the mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    id: u64,
    base: usize,
    len: usize,
}

impl Region {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, address: usize) -> bool {
        address >= self.base && address - self.base < self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultEvent {
    pub address: usize,
    pub kind: AccessKind,
    /// Kernel thread id of the faulting thread, when the backend knows it.
    pub thread: Option<i32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Next {
    Fault(FaultEvent),
    /// A [`Waker::wake`] arrived; the caller has other work queued.
    Wakeup,
    Shutdown,
    Timeout,
}

pub trait FaultBackend: Send {
    fn kind(&self) -> BackendKind;

    fn page_size(&self) -> usize;

    /// Reserve `length` bytes that fault on first access. No memory is committed.
    fn reserve(&mut self, length: usize) -> Result<Region>;

    fn next_event(&mut self, timeout: Option<Duration>) -> Result<Next>;

    /// Copy `bytes` into the region at `byte_lo` and wake every thread blocked
    /// in that range. Pages already installed are left untouched.
    fn install(&mut self, region: &Region, byte_lo: usize, bytes: &[u8]) -> Result<()>;

    /// Wake threads blocked in a range whose pages are already installed.
    fn wake(&mut self, region: &Region, byte_lo: usize, length: usize) -> Result<()>;

    /// Drop the pages so that the next access faults again.
    fn reclaim(&mut self, region: &Region, byte_lo: usize, length: usize) -> Result<()>;

    fn release(&mut self, region: &Region) -> Result<()>;

    /// Copy the current contents of installed pages into `out`.
    fn snapshot(&self, region: &Region, byte_lo: usize, out: &mut [u8]) -> Result<()>;

    /// Bytes currently installed across all regions.
    fn resident_bytes(&self) -> usize;

    fn is_installed(&self, region: &Region, byte_lo: usize) -> bool;

    fn waker(&self) -> Waker;
}

/// Open the requested backend. `Auto` logs and downgrades when userfaultfd is refused.
pub fn open(choice: BackendChoice) -> Result<Box<dyn FaultBackend>> {
    match choice {
        BackendChoice::Userfault => Ok(Box::new(UffdBackend::new()?)),
        BackendChoice::Trap => Ok(Box::new(TrapBackend::new()?)),
        BackendChoice::Auto => match UffdBackend::new() {
            Ok(b) => Ok(Box::new(b)),
            Err(e) => {
                log::warn!("userfaultfd unavailable ({e}); falling back to the trap backend");
                Ok(Box::new(TrapBackend::new()?))
            }
        },
    }
}

pub fn system_page_size() -> usize {
    // SAFETY: sysconf has no memory-safety preconditions.
    let size = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if size <= 0 {
        4096
    } else {
        size as usize
    }
}

pub(crate) fn gettid() -> i32 {
    // SAFETY: gettid cannot fail.
    unsafe { libc::syscall(libc::SYS_gettid) as i32 }
}

#[derive(Debug)]
pub(crate) struct WakerInner {
    fd: OwnedFd,
    shutdown: AtomicBool,
}

/// Cross-thread handle that interrupts [`FaultBackend::next_event`].
#[derive(Debug, Clone)]
pub struct Waker {
    inner: Arc<WakerInner>,
}

impl Waker {
    pub(crate) fn new() -> Result<Self> {
        // SAFETY: plain syscall; the returned descriptor is checked below.
        let fd = unsafe { libc::eventfd(0, libc::EFD_CLOEXEC | libc::EFD_NONBLOCK) };
        if fd < 0 {
            return Err(BackendError::last_os("eventfd"));
        }
        Ok(Waker {
            inner: Arc::new(WakerInner {
                // SAFETY: fd is a fresh descriptor we own.
                fd: unsafe { OwnedFd::from_raw_fd(fd) },
                shutdown: AtomicBool::new(false),
            }),
        })
    }

    pub fn wake(&self) {
        let one: u64 = 1;
        // SAFETY: writes 8 bytes from a live u64 to our eventfd.
        unsafe {
            libc::write(
                self.inner.fd.as_raw_fd(),
                &one as *const u64 as *const libc::c_void,
                8,
            );
        }
    }

    pub fn shutdown(&self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        self.wake();
    }

    pub(crate) fn is_shutdown(&self) -> bool {
        self.inner.shutdown.load(Ordering::SeqCst)
    }

    pub(crate) fn raw_fd(&self) -> i32 {
        self.inner.fd.as_raw_fd()
    }

    pub(crate) fn drain(&self) {
        let mut buf: u64 = 0;
        // SAFETY: reads at most 8 bytes into a live u64; EAGAIN is fine.
        unsafe {
            libc::read(
                self.inner.fd.as_raw_fd(),
                &mut buf as *mut u64 as *mut libc::c_void,
                8,
            );
        }
    }
}

/// Result of polling an event source together with the waker.
pub(crate) enum Ready {
    Source,
    Waker,
    Timeout,
}

pub(crate) fn poll_two(source: i32, waker: &Waker, timeout: Option<Duration>) -> Result<Ready> {
    let mut fds = [
        libc::pollfd {
            fd: source,
            events: libc::POLLIN,
            revents: 0,
        },
        libc::pollfd {
            fd: waker.raw_fd(),
            events: libc::POLLIN,
            revents: 0,
        },
    ];
    let timeout_ms = timeout.map_or(-1, |t| t.as_millis().min(i32::MAX as u128) as i32);
    loop {
        // SAFETY: fds is a live array of two pollfd structs.
        let rc = unsafe { libc::poll(fds.as_mut_ptr(), 2, timeout_ms) };
        if rc < 0 {
            let err = io::Error::last_os_error();
            if err.kind() == io::ErrorKind::Interrupted {
                continue;
            }
            return Err(BackendError::Os {
                op: "poll",
                source: err,
            });
        }
        if rc == 0 {
            return Ok(Ready::Timeout);
        }
        if fds[0].revents & (libc::POLLERR | libc::POLLHUP | libc::POLLNVAL) != 0 {
            return Err(BackendError::Os {
                op: "poll",
                source: io::Error::new(io::ErrorKind::BrokenPipe, "fault source closed"),
            });
        }
        if fds[0].revents & libc::POLLIN != 0 {
            return Ok(Ready::Source);
        }
        return Ok(Ready::Waker);
    }
}

pub(crate) fn check_range(
    region: &Region,
    byte_lo: usize,
    length: usize,
    page_size: usize,
) -> Result<()> {
    if !byte_lo.is_multiple_of(page_size) || !length.is_multiple_of(page_size) {
        return Err(BackendError::InvalidArgument(format!(
            "range {byte_lo}+{length} is not page aligned"
        )));
    }
    if byte_lo.checked_add(length).is_none_or(|end| end > region.len) {
        return Err(BackendError::InvalidArgument(format!(
            "range {byte_lo}+{length} exceeds region of {} bytes",
            region.len
        )));
    }
    Ok(())
}

pub(crate) fn check_reserve(length: usize, page_size: usize) -> Result<()> {
    if length == 0 || !length.is_multiple_of(page_size) {
        return Err(BackendError::InvalidArgument(format!(
            "reservation length {length} must be a positive multiple of {page_size}"
        )));
    }
    Ok(())
}
