//! Greedy decode loop over [`ToyModel`], wired through the paged cache and
//! the attention path selected by an [`OptimizationMode`].

mod metrics;
mod model;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{paged_attention, unfiltered_attention, AttentionConfig, Grouping};
use crate::error::{Error, Result};
use crate::kv_cache::{
    BlockPool, BlockTable, CounterSnapshot, PoolConfig, Precision, SkipSet, SlotMapping,
    WriteReport,
};
use crate::numerics::{argmax, Tensor};

pub use metrics::{accuracy, generation_throughput, total_latency};
pub use model::{ToyModel, ToyModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizationMode {
    Original,
    OptKv,
    OptGqa,
    OptPa,
    Coopt,
}

impl OptimizationMode {
    pub const ALL: [OptimizationMode; 5] = [
        Self::Original,
        Self::OptKv,
        Self::OptGqa,
        Self::OptPa,
        Self::Coopt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::OptKv => "opt_kv",
            Self::OptGqa => "opt_gqa",
            Self::OptPa => "opt_pa",
            Self::Coopt => "coopt",
        }
    }

    /// FP8 cache with skip filtering.
    pub fn quantized_cache(self) -> bool {
        matches!(self, Self::OptKv | Self::Coopt)
    }

    /// K/V loaded once per KV head and shared by its query group.
    pub fn grouped_heads(self) -> bool {
        matches!(self, Self::OptGqa | Self::Coopt)
    }

    /// Reads only the `ceil(t/B)` valid blocks instead of the padded span.
    pub fn valid_block_paging(self) -> bool {
        matches!(self, Self::OptPa | Self::Coopt)
    }

    pub fn precision(self) -> Precision {
        if self.quantized_cache() {
            Precision::Fp8
        } else {
            Precision::Fp32
        }
    }
}

impl fmt::Display for OptimizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub prompt: Vec<u32>,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineOptions {
    /// Sequences decoded together; 0 puts every request in one batch.
    pub max_batch_size: usize,
    /// Also skip cache writes of a prompt token equal to its predecessor
    /// (skip-filtering modes only). Changes attention semantics.
    pub skip_duplicate_tokens: bool,
    /// Spread per-sequence compute over the rayon pool (ignored when it
    /// has a single thread).
    pub parallel: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            max_batch_size: 0,
            skip_duplicate_tokens: false,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SequenceState {
    pub sequence_id: u64,
    pub prompt: Vec<u32>,
    pub generated: Vec<u32>,
    pub table: BlockTable,
    pub done: bool,
    pub max_new_tokens: usize,
    // Final-layer residual of the most recently cached token.
    hidden: Option<Vec<f32>>,
}

impl SequenceState {
    pub fn new(request: &Request) -> Self {
        Self {
            sequence_id: request.id,
            prompt: request.prompt.clone(),
            generated: Vec::new(),
            table: BlockTable::new(request.id),
            done: false,
            max_new_tokens: request.max_new_tokens,
            hidden: None,
        }
    }

    pub fn context_len(&self) -> usize {
        self.prompt.len() + self.generated.len()
    }
}

/// Which code paths ran. Pool counters are deltas over the engine's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModeCounters {
    pub paged_calls: u64,
    pub unfiltered_calls: u64,
    pub grouped_calls: u64,
    pub ungrouped_calls: u64,
    pub skip_filtered_writes: u64,
    pub pool: CounterSnapshot,
}

#[derive(Debug, Default)]
struct PathCounters {
    paged: AtomicU64,
    unfiltered: AtomicU64,
    grouped: AtomicU64,
    ungrouped: AtomicU64,
    skip_filtered: AtomicU64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Per request, seconds from run start to its final token, in request order.
    pub latencies_s: Vec<f64>,
    pub total_generated_tokens: u64,
    pub generation_time_s: f64,
    pub blocks_allocated: usize,
    /// Per decode step, blocks read by layer 0 summed over the batch.
    pub blocks_touched_per_step: Vec<usize>,
    /// Per decode step, the padded gather span times batch size.
    pub gather_span_per_step: Vec<usize>,
    /// Generated tokens per request, in request order.
    pub outputs: Vec<Vec<u32>>,
    /// Layer-0 cache writes over the run.
    pub writes: WriteReport,
    pub counters: ModeCounters,
}

impl RunMetrics {
    pub fn completed_requests(&self) -> usize {
        self.latencies_s.len()
    }

    pub fn total_latency_s(&self) -> f64 {
        total_latency(&self.latencies_s)
    }

    /// Generated tokens per second; 0 for an empty run.
    pub fn throughput(&self) -> f64 {
        if self.total_generated_tokens == 0 {
            return 0.0;
        }
        generation_throughput(self.total_generated_tokens, self.generation_time_s).unwrap_or(0.0)
    }
}

/// A failed run with whatever had completed before the error.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: RunMetrics,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "run failed after {} completed requests: {}",
            self.partial.completed_requests(),
            self.error
        )
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

struct StepInput {
    token: Option<u32>,
    skip_write: bool,
    need_hidden: bool,
}

/// Per-sequence q, k and v projections for one layer.
type Qkv = (Vec<f32>, Vec<f32>, Vec<f32>);
/// Attention output and the number of blocks it touched.
type Attended = (Vec<f32>, usize);

#[derive(Default)]
struct StepStats {
    writes: WriteReport,
    blocks_touched: usize,
    gather_span: usize,
}

pub struct Engine<'m> {
    model: &'m ToyModel,
    mode: OptimizationMode,
    options: EngineOptions,
    counters: PathCounters,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m ToyModel, mode: OptimizationMode, options: EngineOptions) -> Self {
        Self {
            model,
            mode,
            options,
            counters: PathCounters::default(),
        }
    }

    pub fn mode(&self) -> OptimizationMode {
        self.mode
    }

    /// Pool layout matching this model and mode.
    pub fn pool_config(&self, block_size: usize, capacity: usize) -> PoolConfig {
        let cfg = self.model.config();
        PoolConfig {
            block_size,
            num_kv_heads: cfg.num_kv_heads,
            head_dim: cfg.head_dim,
            capacity,
            num_layers: cfg.num_layers,
            precision: self.mode.precision(),
        }
    }

    pub fn counters(&self, pool: &BlockPool) -> ModeCounters {
        let c = &self.counters;
        ModeCounters {
            paged_calls: c.paged.load(Ordering::Relaxed),
            unfiltered_calls: c.unfiltered.load(Ordering::Relaxed),
            grouped_calls: c.grouped.load(Ordering::Relaxed),
            ungrouped_calls: c.ungrouped.load(Ordering::Relaxed),
            skip_filtered_writes: c.skip_filtered.load(Ordering::Relaxed),
            pool: pool.counters(),
        }
    }

    fn check_pool(&self, pool: &BlockPool) -> Result<AttentionConfig> {
        let want = self.pool_config(pool.block_size(), pool.capacity());
        if pool.config() != &want {
            return Err(Error::Config(format!(
                "pool {:?} does not fit model/mode {}: expected {want:?}",
                pool.config(),
                self.mode
            )));
        }
        self.model.config().attention(pool.block_size())
    }

    /// Caches every prompt token of each state, right-padding shorter
    /// prompts. Padded positions are written with slot -1. Returns the
    /// layer-0 write report.
    pub fn prefill(&self, states: &mut [SequenceState], pool: &mut BlockPool) -> Result<WriteReport> {
        let mut refs: Vec<&mut SequenceState> = states.iter_mut().collect();
        self.prefill_refs(&mut refs, pool).map(|s| s.writes)
    }

    fn prefill_refs(
        &self,
        states: &mut [&mut SequenceState],
        pool: &mut BlockPool,
    ) -> Result<StepStats> {
        for s in states.iter() {
            if s.prompt.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "sequence {} has an empty prompt",
                    s.sequence_id
                )));
            }
            if s.table.token_count() != 0 || s.hidden.is_some() {
                return Err(Error::Precondition(format!(
                    "sequence {} is already prefilled",
                    s.sequence_id
                )));
            }
        }
        let longest = states.iter().map(|s| s.prompt.len()).max().unwrap_or(0);
        let dedup = self.options.skip_duplicate_tokens && self.mode.quantized_cache();
        let mut total = StepStats::default();
        for pos in 0..longest {
            let inputs: Vec<StepInput> = states
                .iter()
                .map(|s| StepInput {
                    token: s.prompt.get(pos).copied(),
                    skip_write: dedup && pos > 0 && s.prompt.get(pos) == Some(&s.prompt[pos - 1]),
                    need_hidden: pos + 1 == s.prompt.len(),
                })
                .collect();
            let stats = self.step(states, &inputs, pool)?;
            total.writes.written += stats.writes.written;
            total.writes.skipped += stats.writes.skipped;
        }
        for s in states.iter_mut() {
            s.done = s.max_new_tokens == 0;
        }
        Ok(total)
    }

    /// Picks each sequence's next token from its cached context, appends
    /// it, and caches its K/V.
    pub fn decode_step(&self, states: &mut [SequenceState], pool: &mut BlockPool) -> Result<Vec<u32>> {
        let mut refs: Vec<&mut SequenceState> = states.iter_mut().collect();
        self.decode_refs(&mut refs, pool).map(|(tokens, _)| tokens)
    }

    fn decode_refs(
        &self,
        states: &mut [&mut SequenceState],
        pool: &mut BlockPool,
    ) -> Result<(Vec<u32>, StepStats)> {
        for s in states.iter() {
            if s.done {
                return Err(Error::Precondition(format!(
                    "sequence {} is already done",
                    s.sequence_id
                )));
            }
            if s.hidden.is_none() {
                return Err(Error::Precondition(format!(
                    "sequence {} has not been prefilled",
                    s.sequence_id
                )));
            }
        }
        let next: Vec<u32> = states
            .iter()
            .map(|s| {
                let logits = self.model.logits(s.hidden.as_deref().expect("checked above"));
                argmax(&logits).expect("vocabulary is non-empty") as u32
            })
            .collect();
        let inputs: Vec<StepInput> = next
            .iter()
            .map(|&t| StepInput {
                token: Some(t),
                skip_write: false,
                need_hidden: true,
            })
            .collect();
        let stats = self.step(states, &inputs, pool)?;
        for (s, &t) in states.iter_mut().zip(&next) {
            s.generated.push(t);
            s.done = s.generated.len() >= s.max_new_tokens;
        }
        Ok((next, stats))
    }

    /// One token per state through every layer. K/V of a layer are written
    /// for the whole batch before any sequence attends at that layer.
    fn step(
        &self,
        states: &mut [&mut SequenceState],
        inputs: &[StepInput],
        pool: &mut BlockPool,
    ) -> Result<StepStats> {
        let attn = self.check_pool(pool)?;
        let cfg = self.model.config();
        let (h_k, d) = (cfg.num_kv_heads, cfg.head_dim);
        let b = pool.block_size();
        let n = states.len();

        let mut slots = vec![-1i64; n];
        let mut skip = SkipSet::new();
        for (i, (s, input)) in states.iter_mut().zip(inputs).enumerate() {
            if let Some(tok) = input.token {
                self.model.embed(tok)?;
                let pos = s.table.token_count();
                pool.allocate_blocks(&mut s.table, 1)?;
                slots[i] = s.table.slot(pos, b)?;
                if input.skip_write {
                    skip.insert(slots[i]);
                }
            }
        }
        self.counters
            .skip_filtered
            .fetch_add(skip.len() as u64, Ordering::Relaxed);
        let slots = SlotMapping(slots);

        let mut hidden: Vec<Option<Vec<f32>>> = inputs
            .iter()
            .map(|i| i.token.map(|t| self.model.embed.row(t as usize).to_vec()))
            .collect();
        let active_span = states
            .iter()
            .zip(inputs)
            .filter(|(_, i)| i.token.is_some())
            .map(|(s, _)| s.table.num_blocks())
            .max()
            .unwrap_or(0);
        let mut stats = StepStats::default();

        for (layer, w) in self.model.layers.iter().enumerate() {
            let last_layer = layer + 1 == self.model.layers.len();
            let projected: Vec<Option<Qkv>> =
                self.map(&hidden, |x| {
                    x.as_ref().map(|x| {
                        let mut q = vec![0.0; w.wq.rows()];
                        let mut k = vec![0.0; w.wk.rows()];
                        let mut v = vec![0.0; w.wv.rows()];
                        w.wq.matvec(x, &mut q);
                        w.wk.matvec(x, &mut k);
                        w.wv.matvec(x, &mut v);
                        (q, k, v)
                    })
                });

            let mut keys = vec![0.0f32; n * h_k * d];
            let mut values = vec![0.0f32; n * h_k * d];
            for (i, p) in projected.iter().enumerate() {
                if let Some((_, k, v)) = p {
                    keys[i * h_k * d..(i + 1) * h_k * d].copy_from_slice(k);
                    values[i * h_k * d..(i + 1) * h_k * d].copy_from_slice(v);
                }
            }
            let report = pool.reshape_and_cache(
                layer,
                &Tensor::new(vec![n, h_k, d], keys)?,
                &Tensor::new(vec![n, h_k, d], values)?,
                &slots,
                &skip,
            )?;
            if layer == 0 {
                stats.writes = report;
            }

            let pool_ref: &BlockPool = pool;
            let jobs: Vec<Option<(&BlockTable, Vec<f32>)>> = states
                .iter()
                .zip(inputs)
                .zip(projected)
                .map(|((s, input), p)| {
                    let wanted = !last_layer || input.need_hidden;
                    p.filter(|_| wanted).map(|(q, _, _)| (&s.table, q))
                })
                .collect();
            let attended: Vec<Option<Result<Attended>>> = self.map(&jobs, |job| {
                job.as_ref().map(|(table, q)| {
                    self.attend(q, table, pool_ref, layer, &attn, active_span)
                })
            });

            for (i, out) in attended.into_iter().enumerate() {
                match out {
                    Some(r) => {
                        let (o, touched) = r?;
                        if layer == 0 {
                            stats.blocks_touched += touched;
                            stats.gather_span += active_span;
                        }
                        let x = hidden[i].as_mut().expect("attended rows have input");
                        let mut delta = vec![0.0; x.len()];
                        w.wo.matvec(&o, &mut delta);
                        for (xi, di) in x.iter_mut().zip(&delta) {
                            *xi += di;
                        }
                    }
                    None => {
                        if last_layer {
                            hidden[i] = None;
                        }
                    }
                }
            }
        }

        for ((s, input), h) in states.iter_mut().zip(inputs).zip(hidden) {
            if input.need_hidden {
                s.hidden = h;
            }
        }
        Ok(stats)
    }

    fn attend(
        &self,
        q: &[f32],
        table: &BlockTable,
        pool: &BlockPool,
        layer: usize,
        cfg: &AttentionConfig,
        span: usize,
    ) -> Result<(Vec<f32>, usize)> {
        let q = Tensor::new(vec![cfg.num_query_heads, cfg.head_dim], q.to_vec())?;
        let t = table.token_count();
        let c = &self.counters;
        let grouped = self.mode.grouped_heads();
        if grouped { &c.grouped } else { &c.ungrouped }.fetch_add(1, Ordering::Relaxed);
        let out = if self.mode.valid_block_paging() {
            c.paged.fetch_add(1, Ordering::Relaxed);
            let grouping = if grouped {
                Grouping::Shared
            } else {
                Grouping::PerHead
            };
            paged_attention(&q, table, pool, layer, t, cfg, grouping, false)?
        } else {
            c.unfiltered.fetch_add(1, Ordering::Relaxed);
            unfiltered_attention(&q, table, pool, layer, t, span, cfg, grouped)?
        };
        Ok((out.output.into_data(), out.blocks_touched))
    }

    fn map<T: Sync, U: Send>(&self, items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
        if self.options.parallel && items.len() > 1 && rayon::current_num_threads() > 1 {
            items.par_iter().map(f).collect()
        } else {
            items.iter().map(f).collect()
        }
    }

    /// Prefills and decodes every request to its `max_new_tokens`, in
    /// batches of `max_batch_size`. Sequences keep their blocks afterwards.
    #[allow(clippy::result_large_err)]
    pub fn run_batch(
        &self,
        requests: &[Request],
        pool: &mut BlockPool,
    ) -> std::result::Result<RunMetrics, RunFailure> {
        let start = Instant::now();
        let mut metrics = RunMetrics {
            latencies_s: Vec::with_capacity(requests.len()),
            outputs: Vec::with_capacity(requests.len()),
            ..RunMetrics::default()
        };
        let chunk = match self.options.max_batch_size {
            0 => requests.len().max(1),
            n => n,
        };
        let mut fail = None;
        for batch in requests.chunks(chunk) {
            if let Err(e) = self.run_chunk(batch, pool, start, &mut metrics) {
                fail = Some(e);
                break;
            }
        }
        metrics.generation_time_s = start.elapsed().as_secs_f64();
        metrics.blocks_allocated = pool.allocated_blocks();
        metrics.counters = self.counters(pool);
        match fail {
            None => Ok(metrics),
            Some(error) => Err(RunFailure {
                error,
                partial: metrics,
            }),
        }
    }

    fn run_chunk(
        &self,
        batch: &[Request],
        pool: &mut BlockPool,
        start: Instant,
        metrics: &mut RunMetrics,
    ) -> Result<()> {
        let mut states: Vec<SequenceState> = batch.iter().map(SequenceState::new).collect();
        let mut finished: Vec<Option<f64>> = vec![None; states.len()];
        {
            let mut refs: Vec<&mut SequenceState> = states.iter_mut().collect();
            let stats = self.prefill_refs(&mut refs, pool)?;
            metrics.writes.written += stats.writes.written;
            metrics.writes.skipped += stats.writes.skipped;
        }
        loop {
            let now = start.elapsed().as_secs_f64();
            for (f, s) in finished.iter_mut().zip(&states) {
                if s.done && f.is_none() {
                    *f = Some(now);
                }
            }
            let mut active: Vec<&mut SequenceState> =
                states.iter_mut().filter(|s| !s.done).collect();
            if active.is_empty() {
                break;
            }
            let (tokens, stats) = self.decode_refs(&mut active, pool)?;
            metrics.total_generated_tokens += tokens.len() as u64;
            metrics.writes.written += stats.writes.written;
            metrics.writes.skipped += stats.writes.skipped;
            metrics.blocks_touched_per_step.push(stats.blocks_touched);
            metrics.gather_span_per_step.push(stats.gather_span);
        }
        for (s, f) in states.into_iter().zip(finished) {
            metrics.latencies_s.push(f.expect("every state finished"));
            metrics.outputs.push(s.generated);
        }
        Ok(())
    }
}

/// Blocks a workload needs when every sequence keeps its cache to the end.
pub fn required_blocks(requests: &[Request], block_size: usize) -> usize {
    requests
        .iter()
        .map(|r| (r.prompt.len() + r.max_new_tokens).div_ceil(block_size))
        .sum()
}
