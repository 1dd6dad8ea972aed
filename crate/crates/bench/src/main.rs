use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mka_bench::alloc::{self, PeakAlloc};
use mka_bench::config::{parse_list, EngineKind, PrecisionSetting, RunConfig};
use mka_bench::{bench, report, verify, HarnessError};
use mka_core::memory::ChunkStore;

#[global_allocator]
static GLOBAL: PeakAlloc = PeakAlloc;

#[derive(Parser)]
#[command(name = "mka", version, about = "Verification and benchmarks for memory-keyed attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every property suite; exit 1 if any fails.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = ["single", "double"])]
        precision: Option<String>,
        /// Where to write the machine-readable results.
        #[arg(long, default_value = "verify.json")]
        json: PathBuf,
    },
    /// Time forward passes and write results.csv and report.md.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated: mha, symbolic_mka, fastmka, block_mka_local, block_mka_global.
        #[arg(long)]
        engines: Option<String>,
        /// Comma-separated, strictly ascending.
        #[arg(long)]
        seq_lens: Option<String>,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
    /// Load a chunk-store snapshot, write it back out and check the round trip.
    SnapshotStore {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Chunks recalled per query when checking retrieval.
        #[arg(long, default_value_t = 8)]
        top_r: usize,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, HarnessError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Ok(true) means success, Ok(false) a failed check.
fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Verify {
            config,
            seed,
            precision,
            json,
        } => {
            let mut c = load_config(config.as_ref())?;
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(p) = precision {
                c.precision = p.parse::<PrecisionSetting>()?;
            }
            c.validate()?;
            let r = verify::verify(&c)?;
            for p in &r.properties {
                println!(
                    "{} {:<32} n={:<6} worst={:<12.3e} tol={:<10.1e} {}",
                    if p.passed { "PASS" } else { "FAIL" },
                    p.name,
                    p.instances,
                    p.worst_error,
                    p.tolerance,
                    p.note
                );
            }
            report::write_verify(&json, &r)?;
            println!("{} ({} precision, seed {})", if r.passed { "all properties passed" } else { "FAILED" }, r.precision, r.seed);
            Ok(r.passed)
        }
        Command::Bench {
            config,
            engines,
            seq_lens,
            out,
        } => {
            let mut c = load_config(config.as_ref())?;
            if let Some(e) = engines {
                c.engines = parse_list::<EngineKind>(&e)?;
            }
            if let Some(s) = seq_lens {
                c.seq_lens = parse_list::<usize>(&s)?;
            }
            c.validate()?;
            let records = bench::run(&c, |r| match (&r.skipped, r.wall_ms_median) {
                (Some(why), _) => eprintln!("{:<18} S={:<6} skipped: {why}", r.engine, r.seq_len),
                (None, Some(ms)) => eprintln!("{:<18} S={:<6} {ms:>10.2} ms", r.engine, r.seq_len),
                _ => {}
            })?;
            report::write_bench(&out, &c, &records, alloc::is_active())?;
            println!("wrote {} and {}", out.join("results.csv").display(), out.join("report.md").display());
            Ok(true)
        }
        Command::SnapshotStore { input, out, top_r } => {
            let store = ChunkStore::load(&input, top_r)?;
            store.save(&out)?;
            let reloaded = ChunkStore::load(&out, top_r)?;
            let same_bytes = std::fs::read(&input)? == std::fs::read(&out)?;
            let same_store = reloaded == store;
            let mut same_retrieval = true;
            for chunk in store.chunks() {
                let ids = |s: &ChunkStore| -> Result<Vec<u64>, HarnessError> {
                    Ok(s.retrieve(chunk.centroid.data())?.iter().map(|(c, _)| c.id).collect())
                };
                same_retrieval &= ids(&store)? == ids(&reloaded)?;
            }
            println!(
                "{} chunks, width {}, {}-bit signatures: bytes identical {same_bytes}, store identical {same_store}, retrieval identical {same_retrieval}",
                store.len(),
                store.d(),
                store.h_bits()
            );
            Ok(same_bytes && same_store && same_retrieval)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
