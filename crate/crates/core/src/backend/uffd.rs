use std::collections::HashMap;
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::ptr;
use std::time::Duration;

use super::{
    check_range, check_reserve, poll_two, system_page_size, AccessKind, BackendError,
    BackendKind, FaultBackend, FaultEvent, Next, PageMap, Ready, Region, Result, Waker,
};

// Kernel ABI from <linux/userfaultfd.h>.
const UFFD_API: u64 = 0xAA;
const UFFD_FEATURE_THREAD_ID: u64 = 1 << 8;
const UFFD_USER_MODE_ONLY: libc::c_int = 1;
const UFFD_EVENT_PAGEFAULT: u8 = 0x12;
const UFFD_PAGEFAULT_FLAG_WRITE: u64 = 1 << 0;
const UFFDIO_REGISTER_MODE_MISSING: u64 = 1 << 0;
const UFFDIO_COPY_MODE_DONTWAKE: u64 = 1 << 0;
const UFFDIO_COPY_BIT: u64 = 1 << 0x03;

const fn ioc(dir: u64, nr: u64, size: usize) -> libc::c_ulong {
    ((dir << 30) | ((size as u64) << 16) | (UFFD_API << 8) | nr) as libc::c_ulong
}
const IOC_READ: u64 = 2;
const IOC_RW: u64 = 3;

#[repr(C)]
#[derive(Default)]
struct UffdioApi {
    api: u64,
    features: u64,
    ioctls: u64,
}

#[repr(C)]
#[derive(Default)]
struct UffdioRange {
    start: u64,
    len: u64,
}

#[repr(C)]
#[derive(Default)]
struct UffdioRegister {
    range: UffdioRange,
    mode: u64,
    ioctls: u64,
}

#[repr(C)]
#[derive(Default)]
struct UffdioCopy {
    dst: u64,
    src: u64,
    len: u64,
    mode: u64,
    copy: i64,
}

/// `struct uffd_msg` restricted to the page-fault arm of the union.
#[repr(C)]
#[derive(Default)]
struct UffdMsg {
    event: u8,
    reserved1: u8,
    reserved2: u16,
    reserved3: u32,
    flags: u64,
    address: u64,
    ptid: u32,
    pad: u32,
}

const UFFDIO_API: libc::c_ulong = ioc(IOC_RW, 0x3F, size_of::<UffdioApi>());
const UFFDIO_REGISTER: libc::c_ulong = ioc(IOC_RW, 0x00, size_of::<UffdioRegister>());
const UFFDIO_UNREGISTER: libc::c_ulong = ioc(IOC_READ, 0x01, size_of::<UffdioRange>());
const UFFDIO_WAKE: libc::c_ulong = ioc(IOC_READ, 0x02, size_of::<UffdioRange>());
const UFFDIO_COPY: libc::c_ulong = ioc(IOC_RW, 0x03, size_of::<UffdioCopy>());

struct UffdRegion {
    region: Region,
    pages: PageMap,
}

/// Fault delivery through `userfaultfd(2)`.
pub struct UffdBackend {
    fd: OwnedFd,
    page_size: usize,
    regions: HashMap<u64, UffdRegion>,
    next_id: u64,
    waker: Waker,
}

fn ioctl<T>(fd: i32, request: libc::c_ulong, arg: &mut T) -> io::Result<()> {
    // SAFETY: arg points to a live, correctly sized repr(C) struct matching `request`.
    let rc = unsafe { libc::ioctl(fd, request as _, arg as *mut T) };
    if rc < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

impl UffdBackend {
    pub fn new() -> Result<Self> {
        let flags = libc::O_CLOEXEC | libc::O_NONBLOCK;
        // SAFETY: plain syscall returning a descriptor or -1.
        let mut raw = unsafe { libc::syscall(libc::SYS_userfaultfd, flags) } as i32;
        if raw < 0 && io::Error::last_os_error().raw_os_error() == Some(libc::EPERM) {
            // Unprivileged processes may still handle faults raised from user mode.
            // SAFETY: as above.
            raw = unsafe { libc::syscall(libc::SYS_userfaultfd, flags | UFFD_USER_MODE_ONLY) }
                as i32;
        }
        if raw < 0 {
            return Err(BackendError::Unavailable(format!(
                "userfaultfd: {}",
                io::Error::last_os_error()
            )));
        }
        // SAFETY: raw is a fresh descriptor owned from here on.
        let fd = unsafe { OwnedFd::from_raw_fd(raw) };
        let mut api = UffdioApi {
            api: UFFD_API,
            features: UFFD_FEATURE_THREAD_ID,
            ioctls: 0,
        };
        ioctl(fd.as_raw_fd(), UFFDIO_API, &mut api)
            .map_err(|e| BackendError::Unavailable(format!("UFFDIO_API handshake: {e}")))?;
        if api.features & UFFD_FEATURE_THREAD_ID == 0 {
            return Err(BackendError::Unavailable(
                "kernel does not report faulting thread ids".into(),
            ));
        }
        Ok(UffdBackend {
            fd,
            page_size: system_page_size(),
            regions: HashMap::new(),
            next_id: 1,
            waker: Waker::new()?,
        })
    }

    fn lookup(&self, region: &Region) -> Result<&UffdRegion> {
        self.regions
            .get(&region.id)
            .ok_or(BackendError::NotRegistered(region.id))
    }

    fn wake_range(&self, start: usize, len: usize) -> Result<()> {
        let mut range = UffdioRange {
            start: start as u64,
            len: len as u64,
        };
        ioctl(self.fd.as_raw_fd(), UFFDIO_WAKE, &mut range).map_err(|source| BackendError::Os {
            op: "UFFDIO_WAKE",
            source,
        })
    }

    fn copy_run(&self, dst: usize, src: *const u8, len: usize) -> Result<()> {
        let mut done = 0;
        while done < len {
            let mut copy = UffdioCopy {
                dst: (dst + done) as u64,
                src: src as u64 + done as u64,
                len: (len - done) as u64,
                mode: UFFDIO_COPY_MODE_DONTWAKE,
                copy: 0,
            };
            match ioctl(self.fd.as_raw_fd(), UFFDIO_COPY, &mut copy) {
                Ok(()) => done += copy.copy as usize,
                Err(e) => {
                    if copy.copy > 0 {
                        done += copy.copy as usize;
                        continue;
                    }
                    match e.raw_os_error() {
                        // Someone else's page is already there; leave it alone.
                        Some(libc::EEXIST) => done += self.page_size,
                        Some(libc::EAGAIN) | Some(libc::EINTR) => {}
                        _ => {
                            return Err(BackendError::Os {
                                op: "UFFDIO_COPY",
                                source: e,
                            })
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl FaultBackend for UffdBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Userfault
    }

    fn page_size(&self) -> usize {
        self.page_size
    }

    fn reserve(&mut self, length: usize) -> Result<Region> {
        check_reserve(length, self.page_size)?;
        // SAFETY: anonymous mapping request; the result is checked.
        let base = unsafe {
            libc::mmap(
                ptr::null_mut(),
                length,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                -1,
                0,
            )
        };
        if base == libc::MAP_FAILED {
            return Err(BackendError::last_os("mmap"));
        }
        // SAFETY: base..base+length is the mapping created above.
        unsafe { libc::madvise(base, length, libc::MADV_NOHUGEPAGE) };
        let mut reg = UffdioRegister {
            range: UffdioRange {
                start: base as u64,
                len: length as u64,
            },
            mode: UFFDIO_REGISTER_MODE_MISSING,
            ioctls: 0,
        };
        let registered = ioctl(self.fd.as_raw_fd(), UFFDIO_REGISTER, &mut reg);
        if let Err(source) = registered {
            // SAFETY: unmapping the mapping we just created.
            unsafe { libc::munmap(base, length) };
            return Err(BackendError::Os {
                op: "UFFDIO_REGISTER",
                source,
            });
        }
        if reg.ioctls & UFFDIO_COPY_BIT == 0 {
            // SAFETY: as above.
            unsafe { libc::munmap(base, length) };
            return Err(BackendError::Unavailable("range does not support UFFDIO_COPY".into()));
        }
        let region = Region {
            id: self.next_id,
            base: base as usize,
            len: length,
        };
        self.next_id += 1;
        self.regions.insert(
            region.id,
            UffdRegion {
                region,
                pages: PageMap::new(length, self.page_size),
            },
        );
        Ok(region)
    }

    fn next_event(&mut self, timeout: Option<Duration>) -> Result<Next> {
        loop {
            if self.waker.is_shutdown() {
                return Ok(Next::Shutdown);
            }
            match poll_two(self.fd.as_raw_fd(), &self.waker, timeout)? {
                Ready::Timeout => return Ok(Next::Timeout),
                Ready::Waker => {
                    self.waker.drain();
                    if self.waker.is_shutdown() {
                        return Ok(Next::Shutdown);
                    }
                    return Ok(Next::Wakeup);
                }
                Ready::Source => {
                    let mut msg = UffdMsg::default();
                    // SAFETY: reads one uffd_msg into a correctly sized buffer.
                    let n = unsafe {
                        libc::read(
                            self.fd.as_raw_fd(),
                            &mut msg as *mut UffdMsg as *mut libc::c_void,
                            size_of::<UffdMsg>(),
                        )
                    };
                    if n < 0 {
                        let err = io::Error::last_os_error();
                        if matches!(err.raw_os_error(), Some(libc::EAGAIN) | Some(libc::EINTR)) {
                            continue;
                        }
                        return Err(BackendError::Os {
                            op: "read(userfaultfd)",
                            source: err,
                        });
                    }
                    if n as usize != size_of::<UffdMsg>() || msg.event != UFFD_EVENT_PAGEFAULT {
                        log::debug!("ignoring userfaultfd message with event {:#x}", msg.event);
                        continue;
                    }
                    let kind = if msg.flags & UFFD_PAGEFAULT_FLAG_WRITE != 0 {
                        AccessKind::Write
                    } else {
                        AccessKind::Read
                    };
                    return Ok(Next::Fault(FaultEvent {
                        address: msg.address as usize,
                        kind,
                        thread: Some(msg.ptid as i32),
                    }));
                }
            }
        }
    }

    fn install(&mut self, region: &Region, byte_lo: usize, bytes: &[u8]) -> Result<()> {
        check_range(region, byte_lo, bytes.len(), self.page_size)?;
        let runs = self.lookup(region)?.pages.runs(byte_lo, bytes.len(), true);
        for (lo, len) in runs {
            self.copy_run(region.base + lo, bytes[lo - byte_lo..].as_ptr(), len)?;
        }
        self.regions
            .get_mut(&region.id)
            .expect("looked up above")
            .pages
            .mark(byte_lo, bytes.len(), true);
        self.wake_range(region.base + byte_lo, bytes.len())
    }

    fn wake(&mut self, region: &Region, byte_lo: usize, length: usize) -> Result<()> {
        check_range(region, byte_lo, length, self.page_size)?;
        self.lookup(region)?;
        self.wake_range(region.base + byte_lo, length)
    }

    fn reclaim(&mut self, region: &Region, byte_lo: usize, length: usize) -> Result<()> {
        check_range(region, byte_lo, length, self.page_size)?;
        let state = self
            .regions
            .get_mut(&region.id)
            .ok_or(BackendError::NotRegistered(region.id))?;
        if state.pages.runs(byte_lo, length, false).is_empty() {
            return Ok(());
        }
        // SAFETY: the range lies inside a mapping this backend owns.
        let rc = unsafe {
            libc::madvise(
                (region.base + byte_lo) as *mut libc::c_void,
                length,
                libc::MADV_DONTNEED,
            )
        };
        if rc != 0 {
            return Err(BackendError::last_os("madvise(MADV_DONTNEED)"));
        }
        state.pages.mark(byte_lo, length, false);
        Ok(())
    }

    fn release(&mut self, region: &Region) -> Result<()> {
        let state = self
            .regions
            .remove(&region.id)
            .ok_or(BackendError::NotRegistered(region.id))?;
        let mut range = UffdioRange {
            start: state.region.base as u64,
            len: state.region.len as u64,
        };
        if let Err(e) = ioctl(self.fd.as_raw_fd(), UFFDIO_UNREGISTER, &mut range) {
            log::warn!("UFFDIO_UNREGISTER failed: {e}");
        }
        // SAFETY: unmapping a mapping this backend created and no longer tracks.
        let rc = unsafe { libc::munmap(state.region.base as *mut libc::c_void, state.region.len) };
        if rc != 0 {
            return Err(BackendError::last_os("munmap"));
        }
        Ok(())
    }

    fn snapshot(&self, region: &Region, byte_lo: usize, out: &mut [u8]) -> Result<()> {
        check_range(region, byte_lo, out.len(), self.page_size)?;
        if !self.lookup(region)?.pages.all_installed(byte_lo, out.len()) {
            // Reading a missing page from the handler thread would deadlock.
            return Err(BackendError::InvalidArgument(
                "snapshot of pages that are not installed".into(),
            ));
        }
        // SAFETY: every page in the source range is installed and mapped.
        unsafe {
            ptr::copy_nonoverlapping((region.base + byte_lo) as *const u8, out.as_mut_ptr(), out.len())
        };
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

impl Drop for UffdBackend {
    fn drop(&mut self) {
        let ids: Vec<u64> = self.regions.keys().copied().collect();
        for id in ids {
            let region = self.regions[&id].region;
            let _ = self.release(&region);
        }
    }
}
