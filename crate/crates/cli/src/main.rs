use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ufo_core::{parse_size, BackendChoice};
use ufobench::{append_csv, gen_file, run_bench, BenchConfig, Mode, Op, Pattern, Source};

#[derive(Parser)]
#[command(name = "ufobench", version, about = "Benchmarks for on-demand populated vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Allocate and free a vector.
    Create(BenchArgs),
    /// Sum every element.
    Sum(BenchArgs),
    /// Touch every element one at a time.
    Loop(BenchArgs),
    /// Write a file of little-endian int32 values.
    GenFile(GenArgs),
}

fn size(s: &str) -> Result<usize, String> {
    parse_size(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = Source::Seq)]
    backend: Source,
    #[arg(long, value_enum, default_value_t = Mode::Ufo)]
    mode: Mode,
    #[arg(long, value_parser = size, default_value = "256MiB")]
    size_bytes: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, value_parser = size, default_value = "1MiB")]
    chunk_size: usize,
    #[arg(long, value_parser = size, default_value = "32MiB")]
    high_water: usize,
    #[arg(long, value_parser = size, default_value = "16MiB")]
    low_water: usize,
    /// Input file for `--backend file`.
    #[arg(long)]
    path: Option<PathBuf>,
    /// Results are appended here; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FaultBackend::Auto)]
    fault_backend: FaultBackend,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FaultBackend {
    Auto,
    Userfault,
    Trap,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    path: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, value_enum, default_value_t = Pattern::Index)]
    pattern: Pattern,
    /// Value for the constant pattern.
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    value: i32,
    /// Seed for the random pattern.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn bench(op: Op, a: BenchArgs) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = BenchConfig {
        op,
        source: a.backend,
        mode: a.mode,
        size_bytes: a.size_bytes,
        iters: a.iters,
        chunk_size: a.chunk_size,
        high_water: a.high_water,
        low_water: a.low_water,
        path: a.path,
        fault_backend: match a.fault_backend {
            FaultBackend::Auto => BackendChoice::Auto,
            FaultBackend::Userfault => BackendChoice::Userfault,
            FaultBackend::Trap => BackendChoice::Trap,
        },
    };
    let report = run_bench(&cfg)?;
    log::info!(
        "{op} {}/{}: populate calls {:?}, hash calls {}, evictions {}, checksum {:?}",
        cfg.source,
        cfg.mode,
        report.populate_calls,
        report.hash_calls,
        report.evictions,
        report.checksum
    );
    match a.out {
        Some(path) => append_csv(&path, &report.records)?,
        None => {
            println!("{}", ufobench::CSV_HEADER);
            for r in &report.records {
                println!("{}", r.csv_row());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(ufo_core::config::ENV_LOG, "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Create(a) => bench(Op::Create, a),
        Command::Sum(a) => bench(Op::Sum, a),
        Command::Loop(a) => bench(Op::Loop, a),
        Command::GenFile(g) => gen_file(&g.path, g.count, g.pattern, g.value, g.seed).map_err(Into::into),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ufobench: {e}");
            ExitCode::FAILURE
        }
    }
}
