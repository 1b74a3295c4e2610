//! Create/sum/loop microbenchmarks over eager vectors and on-demand objects.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::hint::black_box;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ufo_core::{
    reduce_chunks, BackendChoice, Core, CoreParams, FileSpec, SeqSpec, UfoConfig, UfoError,
    UfoHandle,
};

pub const CSV_HEADER: &str = "benchmark,backend,mode,iteration,nanos";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Op {
    Create,
    Sum,
    Loop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Source {
    File,
    Seq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Eager,
    Ufo,
    #[value(name = "ufo_ro")]
    UfoRo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Pattern {
    Index,
    Constant,
    Random,
}

macro_rules! display_as_value {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                use clap::ValueEnum;
                f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
            }
        }
    )*};
}

display_as_value!(Op, Source, Mode, Pattern);

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] UfoError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Usage(String),
    #[error("self-check failed: {0}")]
    SelfCheck(String),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub op: Op,
    pub source: Source,
    pub mode: Mode,
    pub size_bytes: usize,
    pub iters: usize,
    pub chunk_size: usize,
    pub high_water: usize,
    pub low_water: usize,
    /// Input for the file source.
    pub path: Option<PathBuf>,
    pub fault_backend: BackendChoice,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            op: Op::Sum,
            source: Source::Seq,
            mode: Mode::Ufo,
            size_bytes: 256 << 20,
            iters: 10,
            chunk_size: 1 << 20,
            high_water: 32 << 20,
            low_water: 16 << 20,
            path: None,
            fault_backend: BackendChoice::Auto,
        }
    }
}

impl BenchConfig {
    /// Number of int32 elements.
    pub fn elements(&self) -> usize {
        self.size_bytes / 4
    }

    fn core_params(&self) -> CoreParams {
        CoreParams::default()
            .with_chunk_size(self.chunk_size)
            .with_marks(self.high_water, self.low_water)
            .with_backend(self.fault_backend)
    }

    fn input_path(&self) -> Result<&Path> {
        let p = self
            .path
            .as_deref()
            .ok_or_else(|| BenchError::Usage("--path is required for the file backend".into()))?;
        let have = std::fs::metadata(p)
            .map_err(|e| BenchError::Usage(format!("{}: {e}", p.display())))?
            .len();
        if have < self.size_bytes as u64 {
            return Err(BenchError::Usage(format!(
                "{} holds {have} bytes, {} requested",
                p.display(),
                self.size_bytes
            )));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub benchmark: Op,
    pub backend: Source,
    pub mode: Mode,
    pub iteration: usize,
    pub nanos: u128,
}

impl Record {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.benchmark, self.backend, self.mode, self.iteration, self.nanos
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub records: Vec<Record>,
    /// Result of the last sum or loop iteration.
    pub checksum: Option<i64>,
    /// Population calls made during each timed iteration (object modes).
    pub populate_calls: Vec<u64>,
    pub hash_calls: u64,
    pub evictions: u64,
}

fn eager_vector(cfg: &BenchConfig) -> Result<Vec<i32>> {
    let n = cfg.elements();
    Ok(match cfg.source {
        Source::Seq => (1..=n as i32).collect(),
        Source::File => {
            let bytes = std::fs::read(cfg.input_path()?)?;
            bytes[..n * 4]
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
    })
}

fn object_config(cfg: &BenchConfig) -> Result<UfoConfig> {
    let n = cfg.elements();
    let config = match cfg.source {
        Source::Seq => SeqSpec::new(1, n as i64, 1).config(4),
        Source::File => FileSpec {
            path: cfg.input_path()?.to_path_buf(),
            base_offset: 0,
            element_size: 4,
            element_count: n,
        }
        .config()?,
    };
    Ok(config.read_only(cfg.mode == Mode::UfoRo))
}

fn sum_slice(v: &[i32]) -> i64 {
    v.iter().map(|&x| x as i64).sum()
}

/// Identity over every element, read one at a time.
fn loop_slice(v: &[i32]) -> i64 {
    let mut last = 0;
    for x in v {
        last = black_box(*x) as i64;
    }
    last
}

fn loop_object(h: &UfoHandle) -> i64 {
    let base = h.body_ptr() as *const i32;
    let mut last = 0;
    for i in 0..h.len() {
        last = black_box(unsafe { base.add(i).read_volatile() }) as i64;
    }
    last
}

fn run_eager(cfg: &BenchConfig, report: &mut BenchReport) -> Result<()> {
    let resident = match cfg.op {
        Op::Create => None,
        _ => Some(eager_vector(cfg)?),
    };
    for it in 0..cfg.iters {
        let t = Instant::now();
        match cfg.op {
            Op::Create => drop(black_box(eager_vector(cfg)?)),
            Op::Sum => report.checksum = Some(sum_slice(resident.as_deref().unwrap())),
            Op::Loop => report.checksum = Some(loop_slice(resident.as_deref().unwrap())),
        }
        report.records.push(record(cfg, it, t.elapsed().as_nanos()));
    }
    Ok(())
}

fn run_object(cfg: &BenchConfig, core: &Core, report: &mut BenchReport) -> Result<()> {
    for it in 0..cfg.iters {
        let config = object_config(cfg)?;
        let before = core.stats().populate_calls;
        let nanos = if cfg.op == Op::Create {
            let t = Instant::now();
            let h = core.create(config)?;
            core.free(&h)?;
            t.elapsed().as_nanos()
        } else {
            // A fresh object per iteration: nothing carries over in the object
            // layer, while the OS page cache stays warm.
            let h = core.create(config)?;
            let t = Instant::now();
            report.checksum = Some(match cfg.op {
                Op::Sum => reduce_chunks(&h, 0i64, |a, v: i32| a + v as i64)?,
                _ => loop_object(&h),
            });
            let nanos = t.elapsed().as_nanos();
            core.free(&h)?;
            nanos
        };
        report.populate_calls.push(core.stats().populate_calls - before);
        report.records.push(record(cfg, it, nanos));
    }
    let s = core.stats();
    report.hash_calls = s.hash_calls;
    report.evictions = s.evictions;
    Ok(())
}

fn record(cfg: &BenchConfig, iteration: usize, nanos: u128) -> Record {
    Record {
        benchmark: cfg.op,
        backend: cfg.source,
        mode: cfg.mode,
        iteration,
        nanos,
    }
}

/// Sum of the sequence 1..10 through the same path as the benchmark; must
/// be 55.
pub fn self_check(mode: Mode, core: Option<&Core>) -> Result<()> {
    let got = match (mode, core) {
        (Mode::Eager, _) => sum_slice(&(1..=10).collect::<Vec<i32>>()),
        (_, Some(core)) => {
            let h = core.create(SeqSpec::new(1, 10, 1).config(4).read_only(mode == Mode::UfoRo))?;
            let s = reduce_chunks(&h, 0i64, |a, v: i32| a + v as i64)?;
            core.free(&h)?;
            s
        }
        (_, None) => return Err(BenchError::Usage("object modes need a core".into())),
    };
    if got != 55 {
        return Err(BenchError::SelfCheck(format!("sum of 1..10 is {got}")));
    }
    Ok(())
}

/// Run one benchmark. Object modes start (and shut down) their own core.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.size_bytes < 4 {
        return Err(BenchError::Usage("--size-bytes must hold at least one int32".into()));
    }
    let mut report = BenchReport::default();
    if cfg.mode == Mode::Eager {
        self_check(cfg.mode, None)?;
        run_eager(cfg, &mut report)?;
        return Ok(report);
    }
    let core = Core::init(cfg.core_params())?;
    self_check(cfg.mode, Some(&core))?;
    let result = run_object(cfg, &core, &mut report);
    core.shutdown()?;
    result.map(|()| report)
}

/// Append records to a CSV file, writing the header only into an empty file.
pub fn append_csv(path: &Path, records: &[Record]) -> io::Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let fresh = file.metadata()?.len() == 0;
    let mut w = BufWriter::new(&mut file);
    if fresh {
        writeln!(w, "{CSV_HEADER}")?;
    }
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()
}

/// Write `count` little-endian int32 values.
pub fn gen_file(path: &Path, count: usize, pattern: Pattern, value: i32, seed: u64) -> io::Result<()> {
    let mut w = BufWriter::with_capacity(1 << 20, File::create(path)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let v = match pattern {
            Pattern::Index => i as i32,
            Pattern::Constant => value,
            Pattern::Random => rng.gen(),
        };
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}
