use std::hint::black_box;
use std::io::Write;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use ufo_core::{
    hash_window, reduce_chunks, Core, CoreParams, FileSpec, Geometry, Populate, PopulateRequest,
    SeqPopulate, SeqSpec, UfoLayout,
};

const MIB: usize = 1 << 20;

fn layout(c: &mut Criterion) {
    let g = Geometry {
        header_size: 100,
        element_size: 12,
        element_count: 50_000_000,
        chunk_size: MIB,
    };
    let l = UfoLayout::compute(g, 4096).unwrap();
    let mut group = c.benchmark_group("layout");
    group.bench_function("compute", |b| b.iter(|| UfoLayout::compute(black_box(g), 4096)));
    group.bench_function("chunk_of_offset", |b| {
        let mut off = 0usize;
        b.iter(|| {
            off = (off + 7_919 * 4096 + 13) % l.total();
            l.chunk_of_offset(black_box(off))
        })
    });
    group.finish();
}

fn hashing(c: &mut Criterion) {
    let mut group = c.benchmark_group("hash_window");
    for size in [4096, 64 << 10, MIB] {
        let data: Vec<u8> = (0..size).map(|i| (i * 31 % 251) as u8).collect();
        group.throughput(Throughput::Bytes(size as u64));
        group.bench_with_input(BenchmarkId::from_parameter(size), &data, |b, d| b.iter(|| hash_window(d)));
    }
    group.finish();
}

fn seq_populate(c: &mut Criterion) {
    let mut group = c.benchmark_group("seq_populate");
    group.throughput(Throughput::Bytes(MIB as u64));
    for esize in [4usize, 8] {
        let p = SeqPopulate { spec: SeqSpec::new(0, i64::MAX / 2, 3) };
        let mut buf = vec![0u8; MIB];
        let n = MIB / esize;
        group.bench_function(BenchmarkId::from_parameter(esize), |b| {
            b.iter(|| p.populate(&mut PopulateRequest::new(n, 2 * n, esize, &mut buf)).unwrap())
        });
    }
    group.finish();
}

fn object_scan(c: &mut Criterion) {
    let size = 64 * MIB;
    let core = Core::init(
        CoreParams::default()
            .with_chunk_size(MIB)
            .with_marks(16 * MIB, 8 * MIB),
    )
    .expect("core starts");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scan.bin");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path).unwrap());
    for i in 0..(size / 4) as i32 {
        w.write_all(&i.to_le_bytes()).unwrap();
    }
    w.flush().unwrap();
    drop(w);
    let file = FileSpec {
        path,
        base_offset: 0,
        element_size: 4,
        element_count: size / 4,
    };

    let mut group = c.benchmark_group("object_scan");
    group.sample_size(10);
    group.throughput(Throughput::Bytes(size as u64));
    let seq = SeqSpec::new(0, (size / 4) as i64 - 1, 1);
    for (name, read_only) in [("seq_rw", false), ("seq_ro", true)] {
        group.bench_function(name, |b| {
            b.iter_batched(
                || core.create(seq.config(4).read_only(read_only)).unwrap(),
                |h| {
                    let s = reduce_chunks(&h, 0i64, |a, v: i32| a + v as i64).unwrap();
                    core.free(&h).unwrap();
                    s
                },
                BatchSize::PerIteration,
            )
        });
    }
    group.bench_function("file_ro", |b| {
        b.iter_batched(
            || core.create(file.config().unwrap().read_only(true)).unwrap(),
            |h| {
                let s = reduce_chunks(&h, 0i64, |a, v: i32| a + v as i64).unwrap();
                core.free(&h).unwrap();
                s
            },
            BatchSize::PerIteration,
        )
    });
    group.finish();
    core.shutdown().unwrap();
}

criterion_group!(benches, layout, hashing, seq_populate, object_scan);
criterion_main!(benches);
