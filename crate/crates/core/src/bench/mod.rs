//! Synthetic workloads, mode-by-mode benchmark runs, and reports.

mod report;
mod workload;

use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{expand_kv_heads, paged_attention, reference_attention, AttentionConfig, Grouping};
use crate::cost_model::{
    effective_access_latency, kernel_load, KernelLoadParams, MemoryHierarchyParams,
    DEFAULT_T_CACHE, DEFAULT_T_DRAM,
};
use crate::engine::{required_blocks, Engine, EngineOptions, OptimizationMode, RunMetrics, ToyModel, ToyModelConfig};
use crate::error::{Error, Result};
use crate::fp8::Fp8Code;
use crate::kv_cache::{BlockPool, BlockTable, PoolConfig, Precision, SkipSet, SlotMapping, DEFAULT_BLOCK_SIZE};
use crate::numerics::Tensor;

pub use report::{
    emit_report, parse_csv, percentile, BenchReport, CostModelReport, CsvRow, Environment,
    ModeReport, ReportFormat, CSV_COLUMNS,
};
pub use workload::{generate_workload, LengthDistribution, Workload, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModelConfig {
    pub t_cache: f64,
    pub t_dram: f64,
}

impl Default for CostModelConfig {
    fn default() -> Self {
        Self {
            t_cache: DEFAULT_T_CACHE,
            t_dram: DEFAULT_T_DRAM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub model: ToyModelConfig,
    pub block_size: usize,
    /// Pool blocks per mode; `None` sizes the pool to the workload.
    pub capacity: Option<usize>,
    pub engine: EngineOptions,
    /// Untimed passes before the measured ones.
    pub warmup: usize,
    /// Timed passes per mode; the one with the median generation time is
    /// reported.
    pub repeats: usize,
    pub cost_model: CostModelConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ToyModelConfig::default(),
            block_size: DEFAULT_BLOCK_SIZE,
            capacity: None,
            engine: EngineOptions::default(),
            warmup: 1,
            repeats: 1,
            cost_model: CostModelConfig::default(),
        }
    }
}

/// Runs the same workload under each mode in turn, each from a fresh pool.
/// A mode that fails is reported with its error and partial metrics.
pub fn run_benchmark(
    workload: &Workload,
    modes: &[OptimizationMode],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if modes.is_empty() {
        return Err(Error::InvalidArgument("no modes to run".into()));
    }
    let model = ToyModel::new(cfg.model.clone())?;
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let checksum = workload.checksum();
    let capacity = cfg
        .capacity
        .unwrap_or_else(|| required_blocks(&workload.requests, cfg.block_size).max(1));

    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        for _ in 0..cfg.warmup {
            let _ = run_mode(&model, mode, workload, cfg, capacity);
        }
        let mut passes = Vec::with_capacity(cfg.repeats.max(1));
        for _ in 0..cfg.repeats.max(1) {
            passes.push(run_mode(&model, mode, workload, cfg, capacity));
        }
        passes.sort_by(|a, b| pass_time(a).total_cmp(&pass_time(b)));
        let median = passes.swap_remove((passes.len() - 1) / 2);
        reports.push(match median {
            Ok((metrics, pool, error)) => {
                mode_report(mode, &metrics, Some(&pool), error, workload, cfg, &checksum)
            }
            Err(e) => mode_report(mode, &RunMetrics::default(), None, Some(e), workload, cfg, &checksum),
        });
    }
    Ok(BenchReport {
        modes: reports,
        environment: Environment {
            config: serde_json::to_value(cfg).map_err(|e| Error::Format {
                what: "config echo",
                detail: e.to_string(),
            })?,
            seed: cfg.model.seed,
            timestamp,
            threads: rayon::current_num_threads(),
        },
    })
}

type Pass = Result<(RunMetrics, BlockPool, Option<Error>)>;

fn pass_time(p: &Pass) -> f64 {
    p.as_ref().map_or(0.0, |(m, _, _)| m.generation_time_s)
}

fn run_mode(
    model: &ToyModel,
    mode: OptimizationMode,
    workload: &Workload,
    cfg: &BenchConfig,
    capacity: usize,
) -> Pass {
    let engine = Engine::new(model, mode, cfg.engine);
    let mut pool = BlockPool::new(engine.pool_config(cfg.block_size, capacity))?;
    Ok(match engine.run_batch(&workload.requests, &mut pool) {
        Ok(m) => (m, pool, None),
        Err(f) => (f.partial, pool, Some(f.error)),
    })
}

fn mode_report(
    mode: OptimizationMode,
    m: &RunMetrics,
    pool: Option<&BlockPool>,
    error: Option<Error>,
    workload: &Workload,
    cfg: &BenchConfig,
    checksum: &str,
) -> ModeReport {
    let mut error = error.map(|e| e.to_string());
    let cost_model = match cost_model_for(m, workload, cfg) {
        Ok(c) => c,
        Err(e) => {
            error.get_or_insert_with(|| e.to_string());
            None
        }
    };
    ModeReport {
        mode: mode.to_string(),
        total_latency_s: m.total_latency_s(),
        throughput_tok_s: m.throughput(),
        p50_s: percentile(&m.latencies_s, 50.0),
        p99_s: percentile(&m.latencies_s, 99.0),
        blocks_allocated: m.blocks_allocated,
        used_cache_bytes: pool.map_or(0, BlockPool::used_cache_bytes),
        cost_model,
        total_tokens: m.total_generated_tokens,
        generation_time_s: m.generation_time_s,
        latencies_s: m.latencies_s.clone(),
        workload_checksum: checksum.to_string(),
        tokens: m.outputs.clone(),
        blocks_touched_per_step: m.blocks_touched_per_step.clone(),
        gather_span_per_step: m.gather_span_per_step.clone(),
        counters: m.counters,
        error,
    }
}

fn cost_model_for(m: &RunMetrics, workload: &Workload, cfg: &BenchConfig) -> Result<Option<CostModelReport>> {
    if m.total_generated_tokens == 0 {
        return Ok(None);
    }
    let hit_rate = m.counters.pool.hit_rate();
    let t_effective_cycles = effective_access_latency(&MemoryHierarchyParams {
        hit_rate,
        t_cache: cfg.cost_model.t_cache,
        t_dram: cfg.cost_model.t_dram,
    })?;
    let n = workload.requests.len() as u64;
    let batch_size = match cfg.engine.max_batch_size as u64 {
        0 => n,
        b => b.min(n),
    };
    let touched: u64 = m.blocks_touched_per_step.iter().map(|&b| b as u64).sum();
    let blocks_per_sequence = touched.div_ceil(m.total_generated_tokens).max(1);
    let c_kernel = kernel_load(&KernelLoadParams {
        batch_size,
        blocks_per_sequence,
        head_dim: cfg.model.head_dim as u64,
    })?;
    Ok(Some(CostModelReport {
        hit_rate,
        t_effective_cycles,
        batch_size,
        blocks_per_sequence,
        c_kernel,
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelftestSummary {
    pub cases: usize,
    pub max_abs_error: f32,
    pub failures: Vec<String>,
}

impl SelftestSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

const SELFTEST_TOL: f32 = 1e-5;

/// Paged attention over an fp32 pool against the dense reference on a
/// small shape grid, plus an FP8 decode/encode identity sweep.
pub fn selftest(seed: u64) -> Result<SelftestSummary> {
    let mut summary = SelftestSummary::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in [1usize, 5, 16, 17, 37, 64] {
        for b in [8usize, 16] {
            for (h_q, h_k) in [(1usize, 1usize), (4, 2), (8, 1)] {
                for d in [4usize, 32] {
                    let cfg = AttentionConfig::new(h_q, h_k, d, b)?;
                    let err = paged_vs_reference(&cfg, t, &mut rng)?;
                    summary.cases += 1;
                    summary.max_abs_error = summary.max_abs_error.max(err);
                    if err.is_nan() || err > SELFTEST_TOL {
                        summary.failures.push(format!(
                            "paged t={t} B={b} H_q={h_q} H_k={h_k} d={d}: max error {err:e}"
                        ));
                    }
                }
            }
        }
    }
    for bits in 0..=u8::MAX {
        let code = Fp8Code(bits);
        summary.cases += 1;
        if let Some(x) = code.to_f32() {
            let back = Fp8Code::from_f32(x);
            let same = back == code || (x == 0.0 && back.to_f32() == Some(0.0));
            if !same {
                summary.failures.push(format!("fp8 code {bits:#04x} re-encodes to {:#04x}", back.0));
            }
        }
    }
    Ok(summary)
}

fn paged_vs_reference(cfg: &AttentionConfig, t: usize, rng: &mut ChaCha8Rng) -> Result<f32> {
    let (h_k, d, b) = (cfg.num_kv_heads, cfg.head_dim, cfg.block_size);
    let mut gauss = |n: usize| -> Vec<f32> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
    let keys = Tensor::new(vec![t, h_k, d], gauss(t * h_k * d))?;
    let values = Tensor::new(vec![t, h_k, d], gauss(t * h_k * d))?;
    let q = Tensor::new(vec![cfg.num_query_heads, d], gauss(cfg.num_query_heads * d))?;

    let mut pool = BlockPool::new(PoolConfig {
        block_size: b,
        num_kv_heads: h_k,
        head_dim: d,
        capacity: t.div_ceil(b),
        num_layers: 1,
        precision: Precision::Fp32,
    })?;
    let mut table = BlockTable::new(0);
    pool.allocate_blocks(&mut table, t)?;
    let slots = (0..t).map(|p| table.slot(p, b)).collect::<Result<Vec<_>>>()?;
    pool.reshape_and_cache(0, &keys, &values, &SlotMapping(slots), &SkipSet::new())?;

    let paged = paged_attention(&q, &table, &pool, 0, t, cfg, Grouping::Shared, false)?;
    let reference = reference_attention(
        &q,
        &expand_kv_heads(&keys, cfg)?,
        &expand_kv_heads(&values, cfg)?,
        cfg,
        false,
    )?;
    Ok(paged
        .output
        .data()
        .iter()
        .zip(reference.output.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max))
}
