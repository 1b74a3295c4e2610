//! Portable fallback: each region is a memfd mapped twice, once `PROT_NONE`
//! for the application and once read-write for the service thread. A `SIGSEGV`
//! handler turns an access to a protected page into an event on a pipe and
//! parks the faulting thread on a futex until the service thread installs
//! something and bumps the generation counter.

use std::collections::HashMap;
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::ptr;
use std::sync::atomic::{AtomicI32, AtomicU32, AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use super::{
    check_range, check_reserve, gettid, poll_two, system_page_size, AccessKind, BackendError,
    BackendKind, FaultBackend, FaultEvent, Next, PageMap, Ready, Region, Result, Waker,
};

const MAX_REGIONS: usize = 4096;

struct Slot {
    base: AtomicUsize,
    len: AtomicUsize,
    pipe: AtomicI32,
}

#[allow(clippy::declare_interior_mutable_const)]
const EMPTY_SLOT: Slot = Slot {
    base: AtomicUsize::new(0),
    len: AtomicUsize::new(0),
    pipe: AtomicI32::new(-1),
};

static SLOTS: [Slot; MAX_REGIONS] = [EMPTY_SLOT; MAX_REGIONS];
static GENERATION: AtomicU32 = AtomicU32::new(0);
static PREVIOUS: OnceLock<libc::sigaction> = OnceLock::new();
static INSTALL: Mutex<()> = Mutex::new(());

const KIND_READ: u64 = 0;
const KIND_WRITE: u64 = 1;
const KIND_UNKNOWN: u64 = 2;

#[cfg(target_arch = "x86_64")]
unsafe fn access_kind(context: *mut libc::c_void) -> u64 {
    if context.is_null() {
        return KIND_UNKNOWN;
    }
    let uc = context as *const libc::ucontext_t;
    // Bit 1 of the page-fault error code is set for writes.
    if (*uc).uc_mcontext.gregs[libc::REG_ERR as usize] & 2 != 0 {
        KIND_WRITE
    } else {
        KIND_READ
    }
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn access_kind(_context: *mut libc::c_void) -> u64 {
    KIND_UNKNOWN
}

fn futex_wait(word: &AtomicU32, expected: u32) {
    // SAFETY: futex on a live static atomic; spurious returns are handled by the caller.
    unsafe {
        libc::syscall(
            libc::SYS_futex,
            word.as_ptr(),
            libc::FUTEX_WAIT | libc::FUTEX_PRIVATE_FLAG,
            expected,
            ptr::null::<libc::timespec>(),
        );
    }
}

fn futex_wake_all(word: &AtomicU32) {
    // SAFETY: as above.
    unsafe {
        libc::syscall(
            libc::SYS_futex,
            word.as_ptr(),
            libc::FUTEX_WAKE | libc::FUTEX_PRIVATE_FLAG,
            i32::MAX,
        );
    }
}

fn bump_generation() {
    GENERATION.fetch_add(1, Ordering::SeqCst);
    futex_wake_all(&GENERATION);
}

// Only async-signal-safe operations below: atomics, write(2), futex(2).
extern "C" fn on_segv(signal: libc::c_int, info: *mut libc::siginfo_t, context: *mut libc::c_void) {
    // SAFETY: the kernel passes a valid siginfo for SA_SIGINFO handlers.
    let address = unsafe { (*info).si_addr() } as usize;
    let pipe = SLOTS.iter().find_map(|slot| {
        let base = slot.base.load(Ordering::Acquire);
        let len = slot.len.load(Ordering::Acquire);
        (base != 0 && address >= base && address - base < len)
            .then(|| slot.pipe.load(Ordering::Acquire))
    });
    let Some(pipe) = pipe.filter(|&fd| fd >= 0) else {
        // SAFETY: forwarding to whatever handler was installed before ours.
        unsafe { chain(signal, info, context) };
        return;
    };
    // SAFETY: errno location is thread-local and always valid.
    let saved_errno = unsafe { *libc::__errno_location() };
    let generation = GENERATION.load(Ordering::SeqCst);
    // SAFETY: context comes from the kernel.
    let kind = unsafe { access_kind(context) };
    let record = [address as u64, gettid() as u64, kind];
    // SAFETY: a 24-byte write is below PIPE_BUF, hence atomic.
    unsafe { libc::write(pipe, record.as_ptr() as *const libc::c_void, 24) };
    while GENERATION.load(Ordering::SeqCst) == generation {
        futex_wait(&GENERATION, generation);
    }
    // SAFETY: see above.
    unsafe { *libc::__errno_location() = saved_errno };
}

unsafe fn chain(signal: libc::c_int, info: *mut libc::siginfo_t, context: *mut libc::c_void) {
    let Some(previous) = PREVIOUS.get() else {
        libc::signal(signal, libc::SIG_DFL);
        return;
    };
    let handler = previous.sa_sigaction;
    if handler == libc::SIG_DFL || handler == libc::SIG_IGN {
        // Re-executing the access now takes the default action.
        libc::sigaction(signal, previous, ptr::null_mut());
    } else if previous.sa_flags & libc::SA_SIGINFO != 0 {
        let f: extern "C" fn(libc::c_int, *mut libc::siginfo_t, *mut libc::c_void) =
            std::mem::transmute(handler);
        f(signal, info, context);
    } else {
        let f: extern "C" fn(libc::c_int) = std::mem::transmute(handler);
        f(signal);
    }
}

fn install_handler() -> Result<()> {
    let _guard = INSTALL.lock().unwrap_or_else(|e| e.into_inner());
    if PREVIOUS.get().is_some() {
        return Ok(());
    }
    // SAFETY: sigaction structs are plain data; zeroed is a valid starting state.
    unsafe {
        let mut action: libc::sigaction = std::mem::zeroed();
        action.sa_sigaction = on_segv as *const () as usize;
        action.sa_flags = libc::SA_SIGINFO | libc::SA_NODEFER;
        libc::sigemptyset(&mut action.sa_mask);
        let mut previous: libc::sigaction = std::mem::zeroed();
        if libc::sigaction(libc::SIGSEGV, &action, &mut previous) != 0 {
            return Err(BackendError::last_os("sigaction(SIGSEGV)"));
        }
        let _ = PREVIOUS.set(previous);
    }
    Ok(())
}

struct TrapRegion {
    region: Region,
    pages: PageMap,
    memfd: OwnedFd,
    alias: *mut u8,
    slot: usize,
}

/// Fault delivery through page protection and `SIGSEGV`.
pub struct TrapBackend {
    events_rx: OwnedFd,
    events_tx: OwnedFd,
    page_size: usize,
    regions: HashMap<u64, TrapRegion>,
    next_id: u64,
    waker: Waker,
}

// SAFETY: the alias pointers refer to mappings owned by this backend and are
// only dereferenced through &self/&mut self methods.
unsafe impl Send for TrapBackend {}

impl TrapBackend {
    pub fn new() -> Result<Self> {
        install_handler()?;
        let mut fds = [0i32; 2];
        // SAFETY: fds is a two-element array as pipe2 expects.
        if unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC) } != 0 {
            return Err(BackendError::last_os("pipe2"));
        }
        // SAFETY: both descriptors are fresh and owned from here on.
        let (rx, tx) = unsafe { (OwnedFd::from_raw_fd(fds[0]), OwnedFd::from_raw_fd(fds[1])) };
        // SAFETY: fcntl on a descriptor we own.
        unsafe {
            let flags = libc::fcntl(rx.as_raw_fd(), libc::F_GETFL);
            libc::fcntl(rx.as_raw_fd(), libc::F_SETFL, flags | libc::O_NONBLOCK);
        }
        Ok(TrapBackend {
            events_rx: rx,
            events_tx: tx,
            page_size: system_page_size(),
            regions: HashMap::new(),
            next_id: 1,
            waker: Waker::new()?,
        })
    }

    fn lookup(&self, region: &Region) -> Result<&TrapRegion> {
        self.regions
            .get(&region.id)
            .ok_or(BackendError::NotRegistered(region.id))
    }

    fn protect(base: usize, len: usize, prot: libc::c_int) -> Result<()> {
        // SAFETY: callers only pass ranges inside mappings owned by this backend.
        if unsafe { libc::mprotect(base as *mut libc::c_void, len, prot) } != 0 {
            return Err(BackendError::last_os("mprotect"));
        }
        Ok(())
    }
}

fn map(len: usize, prot: libc::c_int, fd: i32) -> Result<*mut u8> {
    // SAFETY: shared mapping of a memfd we own; result checked.
    let p = unsafe { libc::mmap(ptr::null_mut(), len, prot, libc::MAP_SHARED, fd, 0) };
    if p == libc::MAP_FAILED {
        return Err(BackendError::last_os("mmap"));
    }
    Ok(p as *mut u8)
}

impl FaultBackend for TrapBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Trap
    }

    fn page_size(&self) -> usize {
        self.page_size
    }

    fn reserve(&mut self, length: usize) -> Result<Region> {
        check_reserve(length, self.page_size)?;
        let name = c"ufo-region";
        // SAFETY: valid C string; result checked.
        let raw = unsafe { libc::memfd_create(name.as_ptr(), libc::MFD_CLOEXEC) };
        if raw < 0 {
            return Err(BackendError::last_os("memfd_create"));
        }
        // SAFETY: fresh descriptor.
        let memfd = unsafe { OwnedFd::from_raw_fd(raw) };
        // SAFETY: ftruncate on our memfd; sparse until written.
        if unsafe { libc::ftruncate(memfd.as_raw_fd(), length as libc::off_t) } != 0 {
            return Err(BackendError::last_os("ftruncate"));
        }
        let user = map(length, libc::PROT_NONE, memfd.as_raw_fd())?;
        let alias = match map(length, libc::PROT_READ | libc::PROT_WRITE, memfd.as_raw_fd()) {
            Ok(a) => a,
            Err(e) => {
                // SAFETY: unmapping what we mapped above.
                unsafe { libc::munmap(user as *mut libc::c_void, length) };
                return Err(e);
            }
        };
        let slot = SLOTS
            .iter()
            .position(|s| {
                s.pipe
                    .compare_exchange(-1, self.events_tx.as_raw_fd(), Ordering::AcqRel, Ordering::Acquire)
                    .is_ok()
            })
            .ok_or_else(|| BackendError::Unavailable("too many trap regions".into()));
        let slot = match slot {
            Ok(s) => s,
            Err(e) => {
                // SAFETY: unmapping what we mapped above.
                unsafe {
                    libc::munmap(user as *mut libc::c_void, length);
                    libc::munmap(alias as *mut libc::c_void, length);
                }
                return Err(e);
            }
        };
        SLOTS[slot].len.store(length, Ordering::Release);
        SLOTS[slot].base.store(user as usize, Ordering::Release);
        let region = Region {
            id: self.next_id,
            base: user as usize,
            len: length,
        };
        self.next_id += 1;
        self.regions.insert(
            region.id,
            TrapRegion {
                region,
                pages: PageMap::new(length, self.page_size),
                memfd,
                alias,
                slot,
            },
        );
        Ok(region)
    }

    fn next_event(&mut self, timeout: Option<Duration>) -> Result<Next> {
        loop {
            if self.waker.is_shutdown() {
                return Ok(Next::Shutdown);
            }
            match poll_two(self.events_rx.as_raw_fd(), &self.waker, timeout)? {
                Ready::Timeout => return Ok(Next::Timeout),
                Ready::Waker => {
                    self.waker.drain();
                    if self.waker.is_shutdown() {
                        return Ok(Next::Shutdown);
                    }
                    return Ok(Next::Wakeup);
                }
                Ready::Source => {
                    let mut record = [0u64; 3];
                    // SAFETY: reads one 24-byte record into a 24-byte buffer.
                    let n = unsafe {
                        libc::read(
                            self.events_rx.as_raw_fd(),
                            record.as_mut_ptr() as *mut libc::c_void,
                            24,
                        )
                    };
                    if n < 0 {
                        let err = io::Error::last_os_error();
                        if matches!(err.raw_os_error(), Some(libc::EAGAIN) | Some(libc::EINTR)) {
                            continue;
                        }
                        return Err(BackendError::Os {
                            op: "read(trap pipe)",
                            source: err,
                        });
                    }
                    if n != 24 {
                        continue;
                    }
                    let kind = match record[2] {
                        KIND_READ => AccessKind::Read,
                        KIND_WRITE => AccessKind::Write,
                        _ => AccessKind::Unknown,
                    };
                    return Ok(Next::Fault(FaultEvent {
                        address: record[0] as usize,
                        kind,
                        thread: Some(record[1] as i32),
                    }));
                }
            }
        }
    }

    fn install(&mut self, region: &Region, byte_lo: usize, bytes: &[u8]) -> Result<()> {
        check_range(region, byte_lo, bytes.len(), self.page_size)?;
        let state = self
            .regions
            .get_mut(&region.id)
            .ok_or(BackendError::NotRegistered(region.id))?;
        for (lo, len) in state.pages.runs(byte_lo, bytes.len(), true) {
            // SAFETY: the alias mapping covers the whole region and is writable.
            unsafe {
                ptr::copy_nonoverlapping(bytes[lo - byte_lo..].as_ptr(), state.alias.add(lo), len)
            };
            Self::protect(region.base + lo, len, libc::PROT_READ | libc::PROT_WRITE)?;
        }
        state.pages.mark(byte_lo, bytes.len(), true);
        bump_generation();
        Ok(())
    }

    fn wake(&mut self, region: &Region, byte_lo: usize, length: usize) -> Result<()> {
        check_range(region, byte_lo, length, self.page_size)?;
        self.lookup(region)?;
        bump_generation();
        Ok(())
    }

    fn reclaim(&mut self, region: &Region, byte_lo: usize, length: usize) -> Result<()> {
        check_range(region, byte_lo, length, self.page_size)?;
        let state = self
            .regions
            .get_mut(&region.id)
            .ok_or(BackendError::NotRegistered(region.id))?;
        let runs = state.pages.runs(byte_lo, length, false);
        if runs.is_empty() {
            return Ok(());
        }
        for (lo, len) in runs {
            Self::protect(region.base + lo, len, libc::PROT_NONE)?;
            // SAFETY: punching a hole in our own memfd.
            let rc = unsafe {
                libc::fallocate(
                    state.memfd.as_raw_fd(),
                    libc::FALLOC_FL_PUNCH_HOLE | libc::FALLOC_FL_KEEP_SIZE,
                    lo as libc::off_t,
                    len as libc::off_t,
                )
            };
            if rc != 0 {
                return Err(BackendError::last_os("fallocate(PUNCH_HOLE)"));
            }
        }
        state.pages.mark(byte_lo, length, false);
        Ok(())
    }

    fn release(&mut self, region: &Region) -> Result<()> {
        let state = self
            .regions
            .remove(&region.id)
            .ok_or(BackendError::NotRegistered(region.id))?;
        let slot = &SLOTS[state.slot];
        slot.base.store(0, Ordering::Release);
        slot.len.store(0, Ordering::Release);
        slot.pipe.store(-1, Ordering::Release);
        // Anyone still parked on this range retries and takes the default action.
        bump_generation();
        // SAFETY: both mappings belong to this region and are no longer referenced.
        unsafe {
            libc::munmap(state.alias as *mut libc::c_void, state.region.len);
            if libc::munmap(state.region.base as *mut libc::c_void, state.region.len) != 0 {
                return Err(BackendError::last_os("munmap"));
            }
        }
        Ok(())
    }

    fn snapshot(&self, region: &Region, byte_lo: usize, out: &mut [u8]) -> Result<()> {
        check_range(region, byte_lo, out.len(), self.page_size)?;
        let state = self.lookup(region)?;
        // SAFETY: the alias mapping is always readable.
        unsafe { ptr::copy_nonoverlapping(state.alias.add(byte_lo), out.as_mut_ptr(), out.len()) };
        Ok(())
    }

    fn resident_bytes(&self) -> usize {
        self.regions.values().map(|r| r.pages.installed_bytes()).sum()
    }

    fn is_installed(&self, region: &Region, byte_lo: usize) -> bool {
        self.regions
            .get(&region.id)
            .is_some_and(|r| byte_lo < region.len && r.pages.is_installed(byte_lo))
    }

    fn waker(&self) -> Waker {
        self.waker.clone()
    }
}

impl Drop for TrapBackend {
    fn drop(&mut self) {
        let ids: Vec<u64> = self.regions.keys().copied().collect();
        for id in ids {
            let region = self.regions[&id].region;
            let _ = self.release(&region);
        }
    }
}
