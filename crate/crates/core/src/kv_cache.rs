//! Block-paged KV cache.
//!
//! Physical storage is a fixed pool of blocks, each holding `block_size`
//! token slots for every layer and KV head. Sequences own an ordered list of
//! physical blocks through a [`BlockTable`]; a token at logical position `p`
//! lives in slot `table.blocks[p / B] * B + p % B`.
//!
//! In fp8 mode every (block, layer, kv-head) cell is one [`Fp8Block`] of
//! `B * d` elements, separately for keys and values. Cells that are still
//! being filled keep their `f32` source rows in a staging buffer so that a
//! scale change re-encodes from the original values instead of from already
//! rounded ones; the buffer is dropped once every slot of the block has been
//! written.

use std::collections::{HashMap, HashSet};
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp8::{Fp8Block, Fp8Code, FP8_MAX};
use crate::numerics::Tensor;

pub const DEFAULT_BLOCK_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp8,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::Fp32 => 0,
            Precision::Fp8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvKind {
    Key,
    Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub block_size: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub capacity: usize,
    #[serde(default = "one")]
    pub num_layers: usize,
    pub precision: Precision,
}

fn one() -> usize {
    1
}

impl PoolConfig {
    fn validate(&self) -> Result<()> {
        let dims = [
            ("block_size", self.block_size),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("num_layers", self.num_layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.capacity > u32::MAX as usize {
            return Err(Error::Config("capacity exceeds u32 block ids".into()));
        }
        Ok(())
    }

    /// Elements in one (block, layer, kv-head) cell.
    pub fn cell_len(&self) -> usize {
        self.block_size * self.head_dim
    }

    /// Bytes one physical block occupies across layers, heads, K and V.
    pub fn bytes_per_block(&self) -> u64 {
        let cells = 2 * self.num_layers * self.num_kv_heads;
        let per_cell = match self.precision {
            Precision::Fp32 => self.cell_len() * 4,
            Precision::Fp8 => self.cell_len() + 4,
        };
        (cells * per_cell) as u64
    }
}

/// Logical-to-physical block map for one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTable {
    sequence_id: u64,
    blocks: Vec<u32>,
    token_count: usize,
}

impl BlockTable {
    pub fn new(sequence_id: u64) -> Self {
        Self {
            sequence_id,
            blocks: Vec::new(),
            token_count: 0,
        }
    }

    pub fn sequence_id(&self) -> u64 {
        self.sequence_id
    }

    pub fn blocks(&self) -> &[u32] {
        &self.blocks
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Slot index of logical position `pos`.
    pub fn slot(&self, pos: usize, block_size: usize) -> Result<i64> {
        let block = self.blocks.get(pos / block_size).ok_or_else(|| {
            Error::OutOfRange(format!(
                "position {pos} of sequence {} has no block",
                self.sequence_id
            ))
        })?;
        Ok(*block as i64 * block_size as i64 + (pos % block_size) as i64)
    }
}

/// Per-token write destinations; negative entries are padding.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SlotMapping(pub Vec<i64>);

impl SlotMapping {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<i64>> for SlotMapping {
    fn from(v: Vec<i64>) -> Self {
        SlotMapping(v)
    }
}

/// Slots whose writes are filtered out.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SkipSet(HashSet<i64>);

impl SkipSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, slot: i64) -> bool {
        self.0.insert(slot)
    }

    pub fn contains(&self, slot: i64) -> bool {
        self.0.contains(&slot)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<i64> for SkipSet {
    fn from_iter<I: IntoIterator<Item = i64>>(iter: I) -> Self {
        SkipSet(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WriteReport {
    pub written: usize,
    pub skipped: usize,
}

/// Dequantized (or copied) K/V for a token range, plus the physical blocks read.
#[derive(Debug, Clone)]
pub struct GatheredKv {
    pub keys: Tensor,
    pub values: Tensor,
    pub blocks_read: Vec<u32>,
}

/// Read/write counters. Relaxed atomics: readers may run concurrently.
#[derive(Debug, Default)]
pub struct PoolCounters {
    pub block_reads: AtomicU64,
    pub block_rereads: AtomicU64,
    pub fp8_encoded: AtomicU64,
    pub fp8_decoded: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub block_reads: u64,
    pub block_rereads: u64,
    pub fp8_encoded: u64,
    pub fp8_decoded: u64,
}

impl CounterSnapshot {
    /// Fraction of block reads that re-referenced an already read block.
    pub fn hit_rate(&self) -> f64 {
        if self.block_reads == 0 {
            0.0
        } else {
            self.block_rereads as f64 / self.block_reads as f64
        }
    }
}

struct StagedCell {
    rows: Vec<f32>,
    max_abs: f32,
    // rows[nonzero..] are all zero
    nonzero: usize,
}

struct Staging {
    written: Vec<bool>,
    // [layer][head], keys then values
    keys: Vec<StagedCell>,
    values: Vec<StagedCell>,
}

enum Store {
    Fp32 {
        keys: Vec<f32>,
        values: Vec<f32>,
    },
    Fp8 {
        keys: Vec<Fp8Block>,
        values: Vec<Fp8Block>,
        staging: HashMap<u32, Staging>,
    },
}

pub struct BlockPool {
    config: PoolConfig,
    store: Store,
    // stack; pop yields the lowest free id first on a fresh pool
    free_list: Vec<u32>,
    owner: Vec<Option<u64>>,
    read_counts: Vec<AtomicU32>,
    counters: PoolCounters,
}

impl std::fmt::Debug for BlockPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockPool")
            .field("config", &self.config)
            .field("free", &self.free_list.len())
            .finish_non_exhaustive()
    }
}

impl BlockPool {
    pub fn new(config: PoolConfig) -> Result<Self> {
        config.validate()?;
        let cells = config.capacity * config.num_layers * config.num_kv_heads;
        let store = match config.precision {
            Precision::Fp32 => Store::Fp32 {
                keys: vec![0.0; cells * config.cell_len()],
                values: vec![0.0; cells * config.cell_len()],
            },
            Precision::Fp8 => Store::Fp8 {
                keys: vec![Fp8Block::zeroed(config.cell_len()); cells],
                values: vec![Fp8Block::zeroed(config.cell_len()); cells],
                staging: HashMap::new(),
            },
        };
        Ok(Self {
            free_list: (0..config.capacity as u32).rev().collect(),
            owner: vec![None; config.capacity],
            read_counts: (0..config.capacity).map(|_| AtomicU32::new(0)).collect(),
            counters: PoolCounters::default(),
            config,
            store,
        })
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn block_size(&self) -> usize {
        self.config.block_size
    }

    pub fn precision(&self) -> Precision {
        self.config.precision
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    pub fn free_blocks(&self) -> usize {
        self.free_list.len()
    }

    pub fn allocated_blocks(&self) -> usize {
        self.owner.iter().filter(|o| o.is_some()).count()
    }

    pub fn is_allocated(&self, block: u32) -> bool {
        self.owner.get(block as usize).is_some_and(|o| o.is_some())
    }

    pub fn bytes_per_block(&self) -> u64 {
        self.config.bytes_per_block()
    }

    pub fn used_cache_bytes(&self) -> u64 {
        used_cache_bytes(self.allocated_blocks() as u64, self.bytes_per_block())
    }

    pub fn counters(&self) -> CounterSnapshot {
        let c = &self.counters;
        CounterSnapshot {
            block_reads: c.block_reads.load(Ordering::Relaxed),
            block_rereads: c.block_rereads.load(Ordering::Relaxed),
            fp8_encoded: c.fp8_encoded.load(Ordering::Relaxed),
            fp8_decoded: c.fp8_decoded.load(Ordering::Relaxed),
        }
    }

    /// Reserves room for `tokens_to_add` more tokens and advances the
    /// table's token count. Returns the number of blocks claimed.
    pub fn allocate_blocks(&mut self, table: &mut BlockTable, tokens_to_add: usize) -> Result<usize> {
        let b = self.config.block_size;
        let target = table.token_count + tokens_to_add;
        let needed = target.div_ceil(b).saturating_sub(table.blocks.len());
        if needed > self.free_list.len() {
            return Err(Error::Capacity {
                sequence: table.sequence_id,
                shortfall: needed - self.free_list.len(),
            });
        }
        for _ in 0..needed {
            let id = self.free_list.pop().expect("checked above");
            self.owner[id as usize] = Some(table.sequence_id);
            table.blocks.push(id);
        }
        table.token_count = target;
        Ok(needed)
    }

    /// Returns every block of `table` to the free list and empties it.
    pub fn free_sequence(&mut self, table: &mut BlockTable) -> Result<usize> {
        for &id in &table.blocks {
            match self.owner.get(id as usize) {
                Some(Some(owner)) if *owner == table.sequence_id => {}
                Some(Some(owner)) => {
                    return Err(Error::Integrity(format!(
                        "block {id} belongs to sequence {owner}, not {}",
                        table.sequence_id
                    )))
                }
                _ => {
                    return Err(Error::Integrity(format!(
                        "double free of block {id} by sequence {}",
                        table.sequence_id
                    )))
                }
            }
        }
        let reclaimed = table.blocks.len();
        for id in table.blocks.drain(..) {
            self.owner[id as usize] = None;
            self.reset_block(id);
            self.free_list.push(id);
        }
        table.token_count = 0;
        Ok(reclaimed)
    }

    fn reset_block(&mut self, id: u32) {
        let range = self.cell_range(id);
        let len = self.config.cell_len();
        match &mut self.store {
            Store::Fp32 { keys, values } => {
                keys[range.start * len..range.end * len].fill(0.0);
                values[range.start * len..range.end * len].fill(0.0);
            }
            Store::Fp8 {
                keys,
                values,
                staging,
            } => {
                for c in range {
                    keys[c] = Fp8Block::zeroed(len);
                    values[c] = Fp8Block::zeroed(len);
                }
                staging.remove(&id);
            }
        }
    }

    fn cell_range(&self, block: u32) -> std::ops::Range<usize> {
        let per_block = self.config.num_layers * self.config.num_kv_heads;
        let start = block as usize * per_block;
        start..start + per_block
    }

    fn cell_index(&self, block: u32, layer: usize, head: usize) -> usize {
        (block as usize * self.config.num_layers + layer) * self.config.num_kv_heads + head
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.num_layers {
            return Err(Error::OutOfRange(format!(
                "layer {layer} of a {}-layer cache",
                self.config.num_layers
            )));
        }
        Ok(())
    }

    /// Writes each token's K/V rows into its slot unless the slot is
    /// negative or in `skip`. Validation happens before any byte changes.
    pub fn reshape_and_cache(
        &mut self,
        layer: usize,
        keys: &Tensor,
        values: &Tensor,
        slots: &SlotMapping,
        skip: &SkipSet,
    ) -> Result<WriteReport> {
        self.check_layer(layer)?;
        let (h, d, b) = (
            self.config.num_kv_heads,
            self.config.head_dim,
            self.config.block_size,
        );
        let n = slots.len();
        keys.expect_shape("cached keys", &[n, h, d])?;
        values.expect_shape("cached values", &[n, h, d])?;

        let mut seen = HashSet::with_capacity(n);
        for &slot in &slots.0 {
            if slot < 0 {
                continue;
            }
            if !seen.insert(slot) {
                return Err(Error::Integrity(format!("slot {slot} written twice in one batch")));
            }
            let block = slot as usize / b;
            if block >= self.config.capacity || self.owner[block].is_none() {
                return Err(Error::Integrity(format!(
                    "slot {slot} points at unallocated block {block}"
                )));
            }
        }
        if self.config.precision == Precision::Fp8 {
            for (i, v) in keys.data().iter().chain(values.data()).enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "non-finite K/V element {i} cannot be fp8 encoded"
                    )));
                }
            }
        }

        let mut report = WriteReport::default();
        for (i, &slot) in slots.0.iter().enumerate() {
            if slot < 0 || skip.contains(slot) {
                report.skipped += 1;
                continue;
            }
            let block = (slot as usize / b) as u32;
            let offset = slot as usize % b;
            for head in 0..h {
                let row = i * h + head;
                self.write_row(layer, block, head, offset, keys.row(row), values.row(row));
            }
            if let Store::Fp8 { staging, .. } = &mut self.store {
                if let Some(st) = staging.get_mut(&block) {
                    st.written[offset] = true;
                    if st.written.iter().all(|w| *w) {
                        staging.remove(&block);
                    }
                }
            }
            report.written += 1;
        }
        Ok(report)
    }

    fn write_row(&mut self, layer: usize, block: u32, head: usize, offset: usize, k: &[f32], v: &[f32]) {
        let d = self.config.head_dim;
        let cell = self.cell_index(block, layer, head);
        let len = self.config.cell_len();
        let (layers, heads, bsize) = (
            self.config.num_layers,
            self.config.num_kv_heads,
            self.config.block_size,
        );
        match &mut self.store {
            Store::Fp32 { keys, values } => {
                let at = cell * len + offset * d;
                keys[at..at + d].copy_from_slice(k);
                values[at..at + d].copy_from_slice(v);
            }
            Store::Fp8 {
                keys,
                values,
                staging,
            } => {
                let st = staging.entry(block).or_insert_with(|| {
                    // source rows of a fresh block are zero; a sealed block
                    // being rewritten recovers them from its codes
                    let first = cell - (layer * heads + head);
                    let restore = |cells: &[Fp8Block]| {
                        cells[first..first + layers * heads]
                            .iter()
                            .map(|blk| {
                                let mut rows = vec![0.0; len];
                                blk.dequantize_into(0, &mut rows)
                                    .expect("encoder never emits NaN");
                                let max_abs = rows.iter().fold(0.0f32, |m, x| m.max(x.abs()));
                                let nonzero = rows.iter().rposition(|x| *x != 0.0).map_or(0, |i| i + 1);
                                StagedCell {
                                    rows,
                                    max_abs,
                                    nonzero,
                                }
                            })
                            .collect()
                    };
                    Staging {
                        written: vec![false; bsize],
                        keys: restore(keys),
                        values: restore(values),
                    }
                });
                let local = layer * heads + head;
                let encoded = stage_and_encode(&mut st.keys[local], &mut keys[cell], offset, k)
                    + stage_and_encode(&mut st.values[local], &mut values[cell], offset, v);
                self.counters
                    .fp8_encoded
                    .fetch_add(encoded as u64, Ordering::Relaxed);
            }
        }
    }

    /// Copies or dequantizes rows `[from, to)` of one cell into `out`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn read_rows(
        &self,
        kind: KvKind,
        layer: usize,
        block: u32,
        head: usize,
        from: usize,
        to: usize,
        out: &mut [f32],
    ) -> Result<()> {
        let d = self.config.head_dim;
        let cell = self.cell_index(block, layer, head);
        debug_assert_eq!(out.len(), (to - from) * d);
        match &self.store {
            Store::Fp32 { keys, values } => {
                let src = match kind {
                    KvKind::Key => keys,
                    KvKind::Value => values,
                };
                let at = cell * self.config.cell_len();
                out.copy_from_slice(&src[at + from * d..at + to * d]);
            }
            Store::Fp8 { keys, values, .. } => {
                let src = match kind {
                    KvKind::Key => &keys[cell],
                    KvKind::Value => &values[cell],
                };
                src.dequantize_into(from * d, out)?;
                self.counters
                    .fp8_decoded
                    .fetch_add(out.len() as u64, Ordering::Relaxed);
            }
        }
        Ok(())
    }

    /// Records one read of a physical block for the hit-rate estimate.
    pub(crate) fn touch_block(&self, block: u32) {
        self.counters.block_reads.fetch_add(1, Ordering::Relaxed);
        if self.read_counts[block as usize].fetch_add(1, Ordering::Relaxed) > 0 {
            self.counters.block_rereads.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// K and V for tokens `[start, end)` of `table`, in token order.
    pub fn gather_cached_kv(
        &self,
        layer: usize,
        table: &BlockTable,
        start: usize,
        end: usize,
    ) -> Result<GatheredKv> {
        self.check_layer(layer)?;
        if start >= end || end > table.token_count {
            return Err(Error::OutOfRange(format!(
                "gather [{start}, {end}) from sequence {} holding {} tokens",
                table.sequence_id, table.token_count
            )));
        }
        let (h, d, b) = (
            self.config.num_kv_heads,
            self.config.head_dim,
            self.config.block_size,
        );
        let n = end - start;
        let mut keys = Tensor::zeros(vec![n, h, d])?;
        let mut values = Tensor::zeros(vec![n, h, d])?;
        let mut blocks_read = Vec::new();
        let mut row = vec![0.0f32; d];
        for logical in start / b..end.div_ceil(b) {
            let physical = table.blocks[logical];
            if self.owner[physical as usize] != Some(table.sequence_id) {
                return Err(Error::Integrity(format!(
                    "sequence {} maps to block {physical} it does not own",
                    table.sequence_id
                )));
            }
            self.touch_block(physical);
            blocks_read.push(physical);
            let lo = start.max(logical * b);
            let hi = end.min((logical + 1) * b);
            for pos in lo..hi {
                let off = pos % b;
                for head in 0..h {
                    let dst = (pos - start) * h + head;
                    self.read_rows(KvKind::Key, layer, physical, head, off, off + 1, &mut row)?;
                    keys.row_mut(dst).copy_from_slice(&row);
                    self.read_rows(KvKind::Value, layer, physical, head, off, off + 1, &mut row)?;
                    values.row_mut(dst).copy_from_slice(&row);
                }
            }
        }
        Ok(GatheredKv {
            keys,
            values,
            blocks_read,
        })
    }

    /// Raw stored bytes of one slot (every layer and head, K then V).
    pub fn slot_bytes(&self, slot: usize) -> Vec<u8> {
        let (b, d) = (self.config.block_size, self.config.head_dim);
        let block = (slot / b) as u32;
        let off = slot % b;
        let mut out = Vec::new();
        for cell in self.cell_range(block) {
            match &self.store {
                Store::Fp32 { keys, values } => {
                    let at = cell * self.config.cell_len() + off * d;
                    for src in [keys, values] {
                        for x in &src[at..at + d] {
                            out.extend_from_slice(&x.to_le_bytes());
                        }
                    }
                }
                Store::Fp8 { keys, values, .. } => {
                    for src in [keys, values] {
                        out.extend(src[cell].codes()[off * d..(off + 1) * d].iter().map(|c| c.0));
                    }
                }
            }
        }
        out
    }

    /// Test hook: overwrite one slot's stored K/V without going through the
    /// write path. fp8 codes stay non-NaN and the cell scale is untouched.
    #[doc(hidden)]
    pub fn scramble_slot(&mut self, slot: usize, salt: u32) {
        let (b, d) = (self.config.block_size, self.config.head_dim);
        let block = (slot / b) as u32;
        let off = slot % b;
        let len = self.config.cell_len();
        let range = self.cell_range(block);
        let mut x = salt.wrapping_mul(2_654_435_761).wrapping_add(1);
        let mut next = || {
            x ^= x << 13;
            x ^= x >> 17;
            x ^= x << 5;
            x
        };
        match &mut self.store {
            Store::Fp32 { keys, values } => {
                for cell in range {
                    let at = cell * len + off * d;
                    for src in [&mut *keys, &mut *values] {
                        for v in &mut src[at..at + d] {
                            *v = (next() % 2001) as f32 / 100.0 - 10.0;
                        }
                    }
                }
            }
            Store::Fp8 { keys, values, .. } => {
                for cell in range {
                    for src in [&mut *keys, &mut *values] {
                        for c in &mut src[cell].codes_mut()[off * d..(off + 1) * d] {
                            *c = Fp8Code((next() % 0x7F) as u8);
                        }
                    }
                }
            }
        }
    }

    /// Serializes the header and every allocated block, little-endian:
    /// `u32 B, u32 H_k, u32 d, u32 capacity, u8 precision, u32 layers`, then
    /// per block `u32 id` followed by one record per (layer, kv-head), keys
    /// before values. An fp8 record is `f32 scale` plus `B*d` code bytes; an
    /// fp32 record is `B*d` little-endian `f32`s.
    pub fn dump(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        for v in [c.block_size, c.num_kv_heads, c.head_dim, c.capacity] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(c.precision.tag());
        out.extend_from_slice(&(c.num_layers as u32).to_le_bytes());
        let len = c.cell_len();
        for id in 0..c.capacity as u32 {
            if !self.is_allocated(id) {
                continue;
            }
            out.extend_from_slice(&id.to_le_bytes());
            for layer in 0..c.num_layers {
                for head in 0..c.num_kv_heads {
                    let cell = self.cell_index(id, layer, head);
                    match &self.store {
                        Store::Fp32 { keys, values } => {
                            for src in [keys, values] {
                                for x in &src[cell * len..(cell + 1) * len] {
                                    out.extend_from_slice(&x.to_le_bytes());
                                }
                            }
                        }
                        Store::Fp8 { keys, values, .. } => {
                            for src in [keys, values] {
                                out.extend_from_slice(&src[cell].scale().to_le_bytes());
                                out.extend(src[cell].codes().iter().map(|c| c.0));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.dump()).map_err(|e| Error::io(path, e))
    }
}

/// Stages `row` at `offset` and re-encodes the cell. Only the new row is
/// encoded when the cell scale does not change. Returns elements encoded.
fn stage_and_encode(st: &mut StagedCell, block: &mut Fp8Block, offset: usize, row: &[f32]) -> usize {
    let d = row.len();
    let at = offset * d;
    let old = &st.rows[at..at + d];
    let old_max = old.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    let row_max = row.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    st.rows[at..at + d].copy_from_slice(row);
    if row_max <= st.max_abs && old_max < st.max_abs {
        // scale unchanged; same result as re-encoding the whole cell
        let scale = block.scale();
        for (c, &x) in block.codes_mut()[at..at + d].iter_mut().zip(row) {
            *c = Fp8Code::from_f32(x / scale);
        }
        return d;
    }
    st.nonzero = st.nonzero.max(at + d);
    let live = &st.rows[..st.nonzero];
    st.max_abs = live.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    block.reencode_prefix(live, st.max_abs);
    debug_assert!(st.max_abs == 0.0 || (st.max_abs / block.scale() - FP8_MAX).abs() < 1e-3);
    live.len()
}

/// Used cache footprint: allocated blocks times bytes per block.
pub fn used_cache_bytes(allocated_blocks: u64, bytes_per_block: u64) -> u64 {
    allocated_blocks * bytes_per_block
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pool(precision: Precision, capacity: usize) -> BlockPool {
        BlockPool::new(PoolConfig {
            block_size: 16,
            num_kv_heads: 2,
            head_dim: 4,
            capacity,
            num_layers: 1,
            precision,
        })
        .unwrap()
    }

    fn random_kv(rng: &mut ChaCha8Rng, n: usize) -> (Tensor, Tensor) {
        let mut gen = || Tensor::from_fn(vec![n, 2, 4], |_| rng.random_range(-2.0..2.0)).unwrap();
        (gen(), gen())
    }

    fn write_tokens(pool: &mut BlockPool, table: &mut BlockTable, k: &Tensor, v: &Tensor) -> WriteReport {
        let n = k.shape()[0];
        let start = table.token_count();
        pool.allocate_blocks(table, n).unwrap();
        let slots: Vec<i64> = (start..start + n)
            .map(|p| table.slot(p, pool.block_size()).unwrap())
            .collect();
        pool.reshape_and_cache(0, k, v, &slots.into(), &SkipSet::new())
            .unwrap()
    }

    #[test]
    fn allocation_boundaries() {
        let mut p = pool(Precision::Fp32, 8);
        let mut t = BlockTable::new(1);
        assert_eq!(p.allocate_blocks(&mut t, 1).unwrap(), 1);
        assert_eq!(p.allocate_blocks(&mut t, 15).unwrap(), 0);
        assert_eq!(t.token_count(), 16);
        assert_eq!(p.allocate_blocks(&mut t, 1).unwrap(), 1);

        let mut t2 = BlockTable::new(2);
        p.allocate_blocks(&mut t2, 10).unwrap();
        assert_eq!(p.allocate_blocks(&mut t2, 5).unwrap(), 0);
    }

    #[test]
    fn capacity_error_names_sequence() {
        let mut p = pool(Precision::Fp32, 2);
        let mut t = BlockTable::new(7);
        match p.allocate_blocks(&mut t, 40) {
            Err(Error::Capacity { sequence: 7, shortfall: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.free_blocks(), 2);
        assert_eq!(t.num_blocks(), 0);
    }

    #[test]
    fn free_and_double_free() {
        let mut p = pool(Precision::Fp32, 4);
        let mut empty = BlockTable::new(1);
        assert_eq!(p.free_sequence(&mut empty).unwrap(), 0);

        let mut t = BlockTable::new(2);
        p.allocate_blocks(&mut t, 40).unwrap();
        let copy = t.clone();
        assert_eq!(p.free_blocks(), 1);
        assert_eq!(p.free_sequence(&mut t).unwrap(), 3);
        assert_eq!(p.free_blocks(), 4);
        assert!(t.blocks().is_empty());
        let mut stale = copy;
        assert!(matches!(p.free_sequence(&mut stale), Err(Error::Integrity(_))));
    }

    #[test]
    fn all_padding_leaves_pool_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for precision in [Precision::Fp32, Precision::Fp8] {
            let mut p = pool(precision, 2);
            let mut t = BlockTable::new(1);
            p.allocate_blocks(&mut t, 3).unwrap();
            let before = p.dump();
            let (k, v) = random_kv(&mut rng, 3);
            let r = p
                .reshape_and_cache(0, &k, &v, &vec![-1, -1, -1].into(), &SkipSet::new())
                .unwrap();
            assert_eq!(r, WriteReport { written: 0, skipped: 3 });
            assert_eq!(before, p.dump());
        }
    }

    #[test]
    fn skip_set_filters_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for precision in [Precision::Fp32, Precision::Fp8] {
            let mut p = pool(precision, 2);
            let mut t = BlockTable::new(1);
            p.allocate_blocks(&mut t, 3).unwrap();
            let before = p.slot_bytes(1);
            let (k, v) = random_kv(&mut rng, 3);
            let skip: SkipSet = [1].into_iter().collect();
            let r = p
                .reshape_and_cache(0, &k, &v, &vec![0, 1, 2].into(), &skip)
                .unwrap();
            assert_eq!(r, WriteReport { written: 2, skipped: 1 });
            assert_eq!(before, p.slot_bytes(1));
        }
    }

    #[test]
    fn write_errors() {
        let mut p = pool(Precision::Fp32, 2);
        let mut t = BlockTable::new(1);
        p.allocate_blocks(&mut t, 1).unwrap();
        let k = Tensor::zeros(vec![1, 2, 4]).unwrap();
        let err = p.reshape_and_cache(0, &k, &k, &vec![16].into(), &SkipSet::new());
        assert!(matches!(err, Err(Error::Integrity(_))));
        let bad = Tensor::zeros(vec![1, 2, 3]).unwrap();
        let err = p.reshape_and_cache(0, &bad, &bad, &vec![0].into(), &SkipSet::new());
        assert!(matches!(err, Err(Error::Shape(_))));
        let two = Tensor::zeros(vec![2, 2, 4]).unwrap();
        let err = p.reshape_and_cache(0, &two, &two, &vec![0, 0].into(), &SkipSet::new());
        assert!(matches!(err, Err(Error::Integrity(_))));
    }

    #[test]
    fn fp32_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut p = pool(Precision::Fp32, 4);
        let mut t = BlockTable::new(1);
        let (k, v) = random_kv(&mut rng, 40);
        write_tokens(&mut p, &mut t, &k, &v);
        let g = p.gather_cached_kv(0, &t, 0, 40).unwrap();
        assert_eq!(g.keys, k);
        assert_eq!(g.values, v);
    }

    #[test]
    fn fp8_single_token_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = pool(Precision::Fp8, 1);
        let mut t = BlockTable::new(1);
        let (k, v) = random_kv(&mut rng, 1);
        write_tokens(&mut p, &mut t, &k, &v);
        let g = p.gather_cached_kv(0, &t, 0, 1).unwrap();
        for (src, got) in [(&k, &g.keys), (&v, &g.values)] {
            for head in 0..2 {
                let row = src.row(head);
                let max = row.iter().fold(0.0f32, |m, x| m.max(x.abs()));
                for (a, b) in row.iter().zip(got.row(head)) {
                    if a.abs() >= max / 448.0 * 2f32.powi(-6) {
                        assert!(((a - b) / a).abs() <= 0.125);
                    }
                }
            }
        }
    }

    #[test]
    fn gather_touches_only_needed_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = pool(Precision::Fp32, 4);
        let mut t = BlockTable::new(1);
        let (k, v) = random_kv(&mut rng, 40);
        write_tokens(&mut p, &mut t, &k, &v);
        let g = p.gather_cached_kv(0, &t, 16, 32).unwrap();
        assert_eq!(g.blocks_read, vec![t.blocks()[1]]);
        assert!(p.gather_cached_kv(0, &t, 0, 41).is_err());
        assert!(p.gather_cached_kv(0, &t, 5, 5).is_err());
    }

    #[test]
    fn used_bytes() {
        assert_eq!(used_cache_bytes(0, 100), 0);
        assert_eq!(used_cache_bytes(10, 16384), 163840);
        let mut p = pool(Precision::Fp32, 8);
        let mut t = BlockTable::new(1);
        p.allocate_blocks(&mut t, 37).unwrap();
        assert_eq!(p.allocated_blocks(), 3);
        assert_eq!(p.used_cache_bytes(), 3 * p.bytes_per_block());
    }

    #[test]
    fn dump_is_stable() {
        let mk = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut p = pool(Precision::Fp8, 4);
            let mut t = BlockTable::new(1);
            let (k, v) = random_kv(&mut rng, 20);
            write_tokens(&mut p, &mut t, &k, &v);
            p.dump()
        };
        let a = mk();
        assert_eq!(a, mk());
        assert_eq!(&a[0..4], &16u32.to_le_bytes());
        assert_eq!(a[16], 1);
        // header + 2 blocks * (id + 2 heads * 2 * (scale + 64 codes))
        assert_eq!(a.len(), 21 + 2 * (4 + 4 * (4 + 64)));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Alloc(u64, usize),
        Free(u64),
    }

    proptest! {
        #[test]
        fn conservation_under_random_ops(
            ops in prop::collection::vec(
                prop_oneof![
                    (0u64..4, 1usize..40).prop_map(|(s, n)| Op::Alloc(s, n)),
                    (0u64..4).prop_map(Op::Free),
                ],
                1..200,
            )
        ) {
            let mut p = pool(Precision::Fp32, 12);
            let mut tables: Vec<BlockTable> = (0..4).map(BlockTable::new).collect();
            for op in ops {
                match op {
                    Op::Alloc(s, n) => {
                        let before = tables[s as usize].clone();
                        if p.allocate_blocks(&mut tables[s as usize], n).is_err() {
                            prop_assert_eq!(&tables[s as usize], &before);
                        }
                    }
                    Op::Free(s) => {
                        p.free_sequence(&mut tables[s as usize]).unwrap();
                    }
                }
                prop_assert_eq!(p.allocated_blocks() + p.free_blocks(), p.capacity());
                let mut all: Vec<u32> = tables.iter().flat_map(|t| t.blocks().to_vec()).collect();
                let total = all.len();
                all.sort_unstable();
                all.dedup();
                prop_assert_eq!(all.len(), total);
                prop_assert_eq!(total, p.allocated_blocks());
                for t in &tables {
                    prop_assert_eq!(t.num_blocks(), t.token_count().div_ceil(16));
                }
            }
        }

        #[test]
        fn fp8_cache_roundtrip_bound(seed in 0u64..1000, n in 1usize..48) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = pool(Precision::Fp8, 4);
            let mut t = BlockTable::new(1);
            // write one token at a time so cell scales grow incrementally
            let (k, v) = random_kv(&mut rng, n);
            for i in 0..n {
                let ki = Tensor::new(vec![1, 2, 4], k.row(2 * i).iter().chain(k.row(2 * i + 1)).copied().collect()).unwrap();
                let vi = Tensor::new(vec![1, 2, 4], v.row(2 * i).iter().chain(v.row(2 * i + 1)).copied().collect()).unwrap();
                write_tokens(&mut p, &mut t, &ki, &vi);
            }
            let g = p.gather_cached_kv(0, &t, 0, n).unwrap();
            for (src, got) in [(&k, &g.keys), (&v, &g.values)] {
                for blk in 0..n.div_ceil(16) {
                    for head in 0..2 {
                        let rows: Vec<usize> = (blk * 16..n.min(blk * 16 + 16)).map(|p| p * 2 + head).collect();
                        let max = rows.iter().flat_map(|&r| src.row(r)).fold(0.0f32, |m, x| m.max(x.abs()));
                        for &r in &rows {
                            for (a, b) in src.row(r).iter().zip(got.row(r)) {
                                if a.abs() >= max / 448.0 * 2f32.powi(-6) {
                                    prop_assert!(((a - b) / a).abs() <= 0.125, "{} vs {}", a, b);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
