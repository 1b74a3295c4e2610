#![allow(dead_code)]

use std::sync::{Mutex, MutexGuard};

use ufo_core::{BackendChoice, Core, CoreParams};

/// Cores are process singletons; tests that start one take this lock.
static SERIAL: Mutex<()> = Mutex::new(());

pub fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|p| p.into_inner())
}

pub const BACKENDS: [BackendChoice; 2] = [BackendChoice::Userfault, BackendChoice::Trap];

pub fn core(backend: BackendChoice, params: CoreParams) -> Core {
    Core::init(params.with_backend(backend)).expect("core starts")
}

pub fn small_core(backend: BackendChoice) -> Core {
    core(
        backend,
        CoreParams::default()
            .with_chunk_size(4096)
            .with_marks(1 << 30, 1 << 29),
    )
}

pub fn i32s(bytes: &[u8]) -> Vec<i32> {
    bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub mod blake3_ref;

/// Resident set size of this process, from /proc.
pub fn vmrss_bytes() -> usize {
    let status = std::fs::read_to_string("/proc/self/status").expect("procfs");
    let line = status
        .lines()
        .find(|l| l.starts_with("VmRSS:"))
        .expect("VmRSS line");
    let kb: usize = line
        .split_whitespace()
        .nth(1)
        .and_then(|v| v.parse().ok())
        .expect("VmRSS value");
    kb * 1024
}

/// `count` little-endian i32 values; value `i` is `pattern(i)`.
pub fn write_i32_file(path: &std::path::Path, count: usize, pattern: impl Fn(usize) -> i32) {
    use std::io::Write;
    let mut w = std::io::BufWriter::with_capacity(8 << 20, std::fs::File::create(path).unwrap());
    for i in 0..count {
        w.write_all(&pattern(i).to_le_bytes()).unwrap();
    }
    w.flush().unwrap();
}
