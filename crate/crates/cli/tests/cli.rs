use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard};

use ufobench::{append_csv, gen_file, run_bench, BenchConfig, Mode, Op, Pattern, Source, CSV_HEADER};

// One core per process: anything that starts one runs under this lock.
static CORE: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    CORE.lock().unwrap_or_else(|e| e.into_inner())
}

fn read_i32s(path: &Path) -> Vec<i32> {
    std::fs::read(path)
        .unwrap()
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn small(op: Op, source: Source, mode: Mode) -> BenchConfig {
    BenchConfig {
        op,
        source,
        mode,
        size_bytes: 4 << 20,
        iters: 3,
        ..BenchConfig::default()
    }
}

#[test]
fn gen_file_patterns() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.bin");

    gen_file(&p, 8, Pattern::Index, 0, 0).unwrap();
    assert_eq!(read_i32s(&p), (0..8).collect::<Vec<_>>());

    gen_file(&p, 8, Pattern::Constant, 5, 0).unwrap();
    assert_eq!(read_i32s(&p), vec![5; 8]);

    gen_file(&p, 1000, Pattern::Random, 0, 42).unwrap();
    let a = read_i32s(&p);
    gen_file(&p, 1000, Pattern::Random, 0, 42).unwrap();
    assert_eq!(a, read_i32s(&p));
    gen_file(&p, 1000, Pattern::Random, 0, 43).unwrap();
    assert_ne!(a, read_i32s(&p));

    gen_file(&p, 0, Pattern::Index, 0, 0).unwrap();
    assert_eq!(std::fs::metadata(&p).unwrap().len(), 0);
}

#[test]
fn every_mode_agrees_on_the_sum() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("in.bin");
    let n = (4usize << 20) / 4;
    gen_file(&path, n, Pattern::Random, 0, 7).unwrap();
    let file_sum: i64 = read_i32s(&path).iter().map(|&v| v as i64).sum();
    let seq_sum = (n as i64) * (n as i64 + 1) / 2;

    for source in [Source::Seq, Source::File] {
        let want = if source == Source::Seq { seq_sum } else { file_sum };
        for mode in [Mode::Eager, Mode::Ufo, Mode::UfoRo] {
            let cfg = BenchConfig { path: Some(path.clone()), ..small(Op::Sum, source, mode) };
            let report = run_bench(&cfg).unwrap();
            assert_eq!(report.checksum, Some(want), "{source}/{mode}");
            assert_eq!(report.records.len(), 3);
            for (i, r) in report.records.iter().enumerate() {
                assert_eq!((r.benchmark, r.backend, r.mode, r.iteration), (Op::Sum, source, mode, i));
            }
        }
    }
}

#[test]
fn loop_over_file_populates_each_chunk_once() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("in.bin");
    let bytes = (5usize << 20) + 12;
    gen_file(&path, bytes / 4, Pattern::Index, 0, 0).unwrap();
    let cfg = BenchConfig {
        size_bytes: bytes,
        path: Some(path),
        ..small(Op::Loop, Source::File, Mode::Ufo)
    };
    let report = run_bench(&cfg).unwrap();
    let chunks = bytes.div_ceil(1 << 20) as u64;
    assert_eq!(report.populate_calls, vec![chunks; 3]);
    assert_eq!(report.checksum, Some((bytes / 4 - 1) as i64));
}

#[test]
fn read_only_mode_never_hashes() {
    let _g = serial();
    // Marks below the object size force evictions.
    let tight = |mode| BenchConfig {
        size_bytes: 8 << 20,
        high_water: 2 << 20,
        low_water: 1 << 20,
        ..small(Op::Sum, Source::Seq, mode)
    };
    let ro = run_bench(&tight(Mode::UfoRo)).unwrap();
    assert!(ro.evictions > 0);
    assert_eq!(ro.hash_calls, 0);

    let rw = run_bench(&tight(Mode::Ufo)).unwrap();
    assert!(rw.evictions > 0);
    assert!(rw.hash_calls >= rw.evictions);
}

#[test]
fn create_is_cheap_and_populates_nothing() {
    let _g = serial();
    let report = run_bench(&BenchConfig {
        size_bytes: 1 << 30,
        ..small(Op::Create, Source::Seq, Mode::Ufo)
    })
    .unwrap();
    assert_eq!(report.populate_calls, vec![0; 3]);
    assert_eq!(report.checksum, None);
}

#[test]
fn missing_input_file_is_an_error() {
    let cfg = BenchConfig {
        path: Some("/nonexistent/in.bin".into()),
        ..small(Op::Sum, Source::File, Mode::Eager)
    };
    assert!(run_bench(&cfg).is_err());
    let cfg = BenchConfig { path: None, ..cfg };
    assert!(run_bench(&cfg).is_err());
}

#[test]
fn csv_appends_under_a_single_header() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results.csv");
    let cfg = small(Op::Sum, Source::Seq, Mode::Ufo);
    append_csv(&out, &run_bench(&cfg).unwrap().records).unwrap();
    append_csv(&out, &run_bench(&cfg).unwrap().records).unwrap();

    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + 6);
    assert_eq!(lines.iter().filter(|l| **l == CSV_HEADER).count(), 1);
    let keys = |l: &str| l.rsplit_once(',').unwrap().0.to_string();
    for i in 0..3 {
        assert_eq!(keys(lines[1 + i]), keys(lines[4 + i]));
        assert_eq!(keys(lines[1 + i]), format!("sum,seq,ufo,{i}"));
        let nanos: u128 = lines[1 + i].rsplit(',').next().unwrap().parse().unwrap();
        assert!(nanos > 0);
    }
}

fn ufobench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ufobench"))
}

#[test]
fn binary_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("in.bin");
    let out = dir.path().join("results.csv");

    let st = ufobench()
        .args(["gen-file", "--path"])
        .arg(&data)
        .args(["--count", "262144", "--pattern", "constant", "--value", "-3"])
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(read_i32s(&data), vec![-3; 262144]);

    for mode in ["eager", "ufo", "ufo_ro"] {
        let st = ufobench()
            .args(["sum", "--backend", "file", "--mode", mode, "--size-bytes", "1MiB"])
            .args(["--iters", "2", "--chunk-size", "64K", "--high-water", "256K", "--low-water", "128K"])
            .arg("--path")
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(st.success(), "{mode}");
    }
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 2);

    let stdout = ufobench()
        .args(["loop", "--mode", "eager", "--size-bytes", "4K", "--iters", "1"])
        .output()
        .unwrap();
    assert!(stdout.status.success());
    let printed = String::from_utf8(stdout.stdout).unwrap();
    assert!(printed.starts_with(CSV_HEADER));
    assert!(printed.contains("loop,seq,eager,0,"));
}

#[test]
fn binary_reports_failures() {
    let missing = ufobench()
        .args(["sum", "--backend", "file", "--path", "/nonexistent/in.bin", "--iters", "1"])
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(!missing.stderr.is_empty());

    let bad_flag = ufobench().args(["sum", "--mode", "lazy"]).output().unwrap();
    assert!(!bad_flag.status.success());

    let bad_chunk = ufobench()
        .args(["sum", "--chunk-size", "1000", "--size-bytes", "4K", "--iters", "1"])
        .output()
        .unwrap();
    assert!(!bad_chunk.status.success());
}
