//! Forward-pass timing: per (engine, seq_len), `warmups` untimed runs then
//! `repeats` timed runs, median reported. Runs are strictly sequential.

use std::time::Instant;

use mka_core::engines::reference::reference_causal_mha_scaled;
use mka_core::engines::{block_mka_forward, fastmka_forward, symbolic_mka_forward, BlockMode, MkaModel};
use mka_core::memory::ChunkStore;
use mka_core::{Scalar, Tensor};
use serde::Serialize;

use crate::alloc;
use crate::config::{EngineKind, PrecisionSetting, RunConfig};
use crate::workload::{history_store, synth_workload};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub engine: EngineKind,
    pub seq_len: usize,
    pub batch: usize,
    /// `None` when the run was skipped.
    pub wall_ms_median: Option<f64>,
    pub tokens_per_s: Option<f64>,
    pub peak_bytes: Option<usize>,
    pub seed: u64,
    pub skipped: Option<String>,
}

/// Rough working set of one forward pass in bytes: activations, projected
/// Q/K/V per level, and per-row score scratch.
pub fn estimated_bytes(engine: EngineKind, config: &RunConfig, seq_len: usize) -> u64 {
    let elem = match config.precision {
        PrecisionSetting::Single => 4,
        PrecisionSetting::Double => 8,
    } as u64;
    let tokens = (config.batch * seq_len) as u64;
    let d = config.d_model as u64;
    let paths = match engine {
        EngineKind::SymbolicMka => 3,
        _ => 1,
    };
    elem * (tokens * d * (6 + 3 * paths) + tokens)
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2.0
    }
}

struct Inputs<T> {
    model: MkaModel<T>,
    x: Tensor<T>,
    store: Option<ChunkStore>,
    head_store: Option<ChunkStore>,
}

fn inputs<T: Scalar>(config: &RunConfig, seq_len: usize) -> Result<Inputs<T>> {
    let rc = &config.retrieval;
    let store = |d| -> Result<Option<ChunkStore>> {
        rc.enabled
            .then(|| history_store(config.seed, d, rc.chunks, rc.chunk_len, rc.top_r, rc.h_bits))
            .transpose()
    };
    Ok(Inputs {
        model: MkaModel::random(config.mka_config()?, config.seed),
        x: synth_workload(config.seed, config.batch, seq_len, config.d_model)?.cast(),
        store: store(config.d_model)?,
        head_store: store(config.dims()?.d_head())?,
    })
}

fn forward<T: Scalar>(engine: EngineKind, config: &RunConfig, i: &Inputs<T>) -> Result<Tensor<T>> {
    let m = &i.model;
    Ok(match engine {
        EngineKind::Mha => reference_causal_mha_scaled(&i.x, &m.proj, m.config.dims, m.config.scale())?,
        EngineKind::SymbolicMka => symbolic_mka_forward(m, &i.x, i.store.as_ref(), None)?.0,
        EngineKind::Fastmka => fastmka_forward(m, &i.x, i.store.as_ref(), None)?.0,
        EngineKind::BlockMkaLocal => {
            let plan = config.block_plan(BlockMode::Local {
                window: config.block.window,
            })?;
            block_mka_forward(m, &i.x, &plan, None)?
        }
        EngineKind::BlockMkaGlobal => {
            block_mka_forward(m, &i.x, &config.block_plan(BlockMode::Global)?, i.head_store.as_ref())?
        }
    })
}

fn time_engine<T: Scalar>(engine: EngineKind, config: &RunConfig, seq_len: usize) -> Result<BenchRecord> {
    let inputs = inputs::<T>(config, seq_len)?;
    for _ in 0..config.warmups {
        std::hint::black_box(forward(engine, config, &inputs)?);
    }
    let base = alloc::reset_peak();
    let mut samples = Vec::with_capacity(config.repeats);
    for _ in 0..config.repeats {
        let start = Instant::now();
        let out = forward(engine, config, &inputs)?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let wall_ms = median(&mut samples).max(1e-6);
    Ok(BenchRecord {
        engine,
        seq_len,
        batch: config.batch,
        wall_ms_median: Some(wall_ms),
        tokens_per_s: Some((config.batch * seq_len) as f64 / (wall_ms / 1e3)),
        peak_bytes: Some(alloc::peak_since(base)),
        seed: config.seed,
        skipped: None,
    })
}

/// Times one (engine, seq_len) pair, or records it as skipped when its
/// estimated working set exceeds the memory budget.
pub fn bench_one(engine: EngineKind, config: &RunConfig, seq_len: usize) -> Result<BenchRecord> {
    let need = estimated_bytes(engine, config, seq_len);
    if need > config.memory_budget_bytes {
        return Ok(BenchRecord {
            engine,
            seq_len,
            batch: config.batch,
            wall_ms_median: None,
            tokens_per_s: None,
            peak_bytes: None,
            seed: config.seed,
            skipped: Some(format!(
                "estimated {need} bytes exceeds budget {}",
                config.memory_budget_bytes
            )),
        });
    }
    match config.precision {
        PrecisionSetting::Single => time_engine::<f32>(engine, config, seq_len),
        PrecisionSetting::Double => time_engine::<f64>(engine, config, seq_len),
    }
}

/// Every configured engine at every configured length, in that order.
pub fn run(config: &RunConfig, mut progress: impl FnMut(&BenchRecord)) -> Result<Vec<BenchRecord>> {
    config.validate()?;
    let mut records = Vec::new();
    for &engine in &config.engines {
        for &seq_len in &config.seq_lens {
            let r = bench_one(engine, config, seq_len)?;
            progress(&r);
            records.push(r);
        }
    }
    Ok(records)
}

fn wall(records: &[BenchRecord], engine: EngineKind, seq_len: usize) -> Option<f64> {
    records
        .iter()
        .find(|r| r.engine == engine && r.seq_len == seq_len)
        .and_then(|r| r.wall_ms_median)
}

/// `time(2N) / time(N)` for every pair of measured lengths `N`, `2N`.
pub fn doubling_ratios(records: &[BenchRecord], engine: EngineKind) -> Vec<(usize, usize, f64)> {
    let mut lens: Vec<usize> = records.iter().filter(|r| r.engine == engine).map(|r| r.seq_len).collect();
    lens.sort_unstable();
    lens.iter()
        .filter_map(|&n| Some((n, 2 * n, wall(records, engine, 2 * n)? / wall(records, engine, n)?)))
        .collect()
}

/// `time(reference) / time(engine)` at `seq_len`.
pub fn speedup(records: &[BenchRecord], engine: EngineKind, reference: EngineKind, seq_len: usize) -> Option<f64> {
    Some(wall(records, reference, seq_len)? / wall(records, engine, seq_len)?)
}
