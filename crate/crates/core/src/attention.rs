//! Single-query attention over cached context.
//!
//! Three computations share one per-head kernel:
//! - [`reference_attention`]: dense softmax attention with one K/V head per
//!   query head. Everything else is checked against it.
//! - [`gqa_attention`]: query heads grouped onto shared K/V heads.
//! - [`paged_attention`]: reads K/V straight from the block pool, touching
//!   only blocks `0..ceil(t/B)` and only the first `t` positions inside them.
//!
//! [`unfiltered_attention`] is the baseline read path: it materializes a
//! dense copy of a padded block-table span and masks afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::{BlockPool, BlockTable, KvKind};
use crate::numerics::{block_sum_reduce, dot_unchecked, max_of, stable_softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub block_size: usize,
}

impl AttentionConfig {
    pub fn new(
        num_query_heads: usize,
        num_kv_heads: usize,
        head_dim: usize,
        block_size: usize,
    ) -> Result<Self> {
        let cfg = Self {
            num_query_heads,
            num_kv_heads,
            head_dim,
            block_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_query_heads == 0 || self.num_kv_heads == 0 {
            return Err(Error::Config("head counts must be >= 1".into()));
        }
        if self.num_query_heads % self.num_kv_heads != 0 {
            return Err(Error::Config(format!(
                "{} query heads cannot be split evenly over {} kv heads",
                self.num_query_heads, self.num_kv_heads
            )));
        }
        if self.head_dim == 0 || self.block_size == 0 {
            return Err(Error::Config("head_dim and block_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.num_query_heads / self.num_kv_heads
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.head_dim as f32).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `[1, H_q, d]`
    pub output: Tensor,
    /// One softmax row per query head, when diagnostics are on.
    pub weights: Option<Vec<Vec<f32>>>,
    pub blocks_touched: usize,
}

/// How paged attention shares K/V loads between the query heads of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Grouping {
    /// Load each KV head once and score every query head of its group.
    #[default]
    Shared,
    /// Every query head loads its KV head independently.
    PerHead,
}

pub fn query_group_of(head: usize, cfg: &AttentionConfig) -> Result<usize> {
    if head >= cfg.num_query_heads {
        return Err(Error::InvalidArgument(format!(
            "query head {head} out of range for {} heads",
            cfg.num_query_heads
        )));
    }
    Ok(head / cfg.group_size())
}

/// Repeats each KV head `group_size` times: `[t, H_k, d] -> [t, H_q, d]`.
pub fn expand_kv_heads(kv: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
    let (h_k, d) = (cfg.num_kv_heads, cfg.head_dim);
    let t = kv.shape().first().copied().unwrap_or(0);
    kv.expect_shape("kv to expand", &[t, h_k, d])?;
    let g = cfg.group_size();
    let mut data = Vec::with_capacity(t * cfg.num_query_heads * d);
    for j in 0..t {
        for kh in 0..h_k {
            let row = kv.row(j * h_k + kh);
            for _ in 0..g {
                data.extend_from_slice(row);
            }
        }
    }
    Tensor::new(vec![t, cfg.num_query_heads, d], data)
}

/// `scores` in, weights out; `out += sum_j w_j * value(j)`.
fn weighted_sum<'a>(weights: &[f32], value: impl Fn(usize) -> &'a [f32], out: &mut [f32]) {
    for (j, &w) in weights.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(value(j)) {
            *o += w * v;
        }
    }
}

fn check_query(q: &Tensor, cfg: &AttentionConfig) -> Result<()> {
    cfg.validate()?;
    let want = [cfg.num_query_heads, cfg.head_dim];
    if q.shape() == want || q.shape() == [1, want[0], want[1]] {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "query: expected {want:?}, got {:?}",
            q.shape()
        )))
    }
}

/// Dense attention where K/V carry `kv_heads` heads and query head `h`
/// reads head `h / (H_q / kv_heads)`.
fn dense(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttentionConfig,
    kv_heads: usize,
    diagnostics: bool,
) -> Result<AttentionOutput> {
    check_query(q, cfg)?;
    let d = cfg.head_dim;
    let t = k.shape().first().copied().unwrap_or(0);
    k.expect_shape("keys", &[t, kv_heads, d])?;
    v.expect_shape("values", &[t, kv_heads, d])?;
    let group = cfg.num_query_heads / kv_heads;
    let scale = cfg.scale();
    let mut output = Tensor::zeros(vec![1, cfg.num_query_heads, d])?;
    let mut weights = diagnostics.then(Vec::new);
    let mut scores = vec![0.0f32; t];
    // outer loop over shared KV heads, inner over the queries that read it
    for kh in 0..kv_heads {
        for h in kh * group..(kh + 1) * group {
            let qh = q.row(h);
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot_unchecked(qh, k.row(j * kv_heads + kh)) * scale;
            }
            stable_softmax_in_place(&mut scores)?;
            weighted_sum(&scores, |j| v.row(j * kv_heads + kh), output.row_mut(h));
            if let Some(w) = weights.as_mut() {
                w.push(scores.clone());
            }
        }
    }
    Ok(AttentionOutput {
        output,
        weights,
        blocks_touched: 0,
    })
}

/// `q: [H_q, d]`, `k`/`v: [t, H_q, d]`. No grouping, no paging.
pub fn reference_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttentionConfig,
    diagnostics: bool,
) -> Result<AttentionOutput> {
    dense(q, k, v, cfg, cfg.num_query_heads, diagnostics)
}

/// `q: [H_q, d]`, `k`/`v: [t, H_k, d]`; query head `i` attends over KV head
/// `query_group_of(i)`. Outputs stay in query-head order.
pub fn gqa_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttentionConfig,
    diagnostics: bool,
) -> Result<AttentionOutput> {
    cfg.validate()?;
    dense(q, k, v, cfg, cfg.num_kv_heads, diagnostics)
}

fn check_paged(pool: &BlockPool, table: &BlockTable, t: usize, cfg: &AttentionConfig) -> Result<()> {
    let pc = pool.config();
    if pc.block_size != cfg.block_size
        || pc.num_kv_heads != cfg.num_kv_heads
        || pc.head_dim != cfg.head_dim
    {
        return Err(Error::Config(format!(
            "attention config {cfg:?} does not match pool layout {pc:?}"
        )));
    }
    if t == 0 || t > table.token_count() {
        return Err(Error::OutOfRange(format!(
            "context length {t} but sequence {} caches {} tokens",
            table.sequence_id(),
            table.token_count()
        )));
    }
    Ok(())
}

/// Valid-block paged attention.
///
/// Phase 1 loads K and V of blocks `0..ceil(t/B)` (only the first
/// `t - b*B` rows of the last one), scores them, and keeps a max per block.
/// The global max is the max of block maxima; each block's exponentials are
/// summed with [`block_sum_reduce`], and the per-block partials are reduced
/// the same way to form the denominator. Phase 2 forms `sum_i a_i v_i` from
/// the blocks already loaded.
#[allow(clippy::too_many_arguments)]
pub fn paged_attention(
    q: &Tensor,
    table: &BlockTable,
    pool: &BlockPool,
    layer: usize,
    t: usize,
    cfg: &AttentionConfig,
    grouping: Grouping,
    diagnostics: bool,
) -> Result<AttentionOutput> {
    check_query(q, cfg)?;
    check_paged(pool, table, t, cfg)?;
    let (b, d, h_k) = (cfg.block_size, cfg.head_dim, cfg.num_kv_heads);
    let group = cfg.group_size();
    let valid_blocks = t.div_ceil(b);
    let scale = cfg.scale();

    for &physical in &table.blocks()[..valid_blocks] {
        pool.touch_block(physical);
    }

    let mut output = Tensor::zeros(vec![1, cfg.num_query_heads, d])?;
    let mut weights = diagnostics.then(|| vec![Vec::new(); cfg.num_query_heads]);
    let mut k_buf = vec![0.0f32; t * d];
    let mut v_buf = vec![0.0f32; t * d];
    let mut scores = vec![0.0f32; t];
    let mut block_max = vec![0.0f32; valid_blocks];
    let mut partials = vec![0.0f32; valid_blocks];

    let load = |kh: usize, k_buf: &mut [f32], v_buf: &mut [f32]| -> Result<()> {
        for (logical, &physical) in table.blocks()[..valid_blocks].iter().enumerate() {
            let rows = b.min(t - logical * b);
            let span = logical * b * d..(logical * b + rows) * d;
            pool.read_rows(KvKind::Key, layer, physical, kh, 0, rows, &mut k_buf[span.clone()])?;
            pool.read_rows(KvKind::Value, layer, physical, kh, 0, rows, &mut v_buf[span])?;
        }
        Ok(())
    };

    for kh in 0..h_k {
        if grouping == Grouping::Shared {
            load(kh, &mut k_buf, &mut v_buf)?;
        }
        for h in kh * group..(kh + 1) * group {
            if grouping == Grouping::PerHead {
                load(kh, &mut k_buf, &mut v_buf)?;
            }
            let qh = q.row(h);
            for (blk, m) in block_max.iter_mut().enumerate() {
                let span = blk * b..t.min((blk + 1) * b);
                for j in span.clone() {
                    scores[j] = dot_unchecked(qh, &k_buf[j * d..(j + 1) * d]) * scale;
                }
                *m = max_of(&scores[span]);
            }
            if let Some(j) = scores.iter().position(|s| !s.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite attention score at position {j}"
                )));
            }
            let global_max = max_of(&block_max);
            for (blk, p) in partials.iter_mut().enumerate() {
                let span = blk * b..t.min((blk + 1) * b);
                for s in &mut scores[span.clone()] {
                    *s = (*s - global_max).exp();
                }
                *p = block_sum_reduce(&scores[span])?;
            }
            let denom = block_sum_reduce(&partials)?;
            for s in scores.iter_mut() {
                *s /= denom;
            }
            weighted_sum(&scores, |j| &v_buf[j * d..(j + 1) * d], output.row_mut(h));
            if let Some(w) = weights.as_mut() {
                w[h] = scores.clone();
            }
        }
    }

    Ok(AttentionOutput {
        output,
        weights,
        blocks_touched: valid_blocks,
    })
}

/// Baseline read path: copies `span_blocks` whole blocks of a padded block
/// table into a dense buffer, then attends over its first `t` rows. Entries
/// past the end of `table` repeat its last block, as padded batch tables do.
/// With `grouped == false` K/V are expanded to one head per query head and
/// [`reference_attention`] runs; otherwise [`gqa_attention`].
#[allow(clippy::too_many_arguments)]
pub fn unfiltered_attention(
    q: &Tensor,
    table: &BlockTable,
    pool: &BlockPool,
    layer: usize,
    t: usize,
    span_blocks: usize,
    cfg: &AttentionConfig,
    grouped: bool,
) -> Result<AttentionOutput> {
    check_query(q, cfg)?;
    check_paged(pool, table, t, cfg)?;
    let (b, d, h_k) = (cfg.block_size, cfg.head_dim, cfg.num_kv_heads);
    let span_blocks = span_blocks.max(table.num_blocks());
    let rows = span_blocks * b;
    let mut keys = vec![0.0f32; rows * h_k * d];
    let mut values = vec![0.0f32; rows * h_k * d];
    let mut scratch = vec![0.0f32; b * d];
    let last = *table.blocks().last().expect("t >= 1 implies a block");
    for logical in 0..span_blocks {
        let physical = table.blocks().get(logical).copied().unwrap_or(last);
        pool.touch_block(physical);
        for kh in 0..h_k {
            for (kind, dst) in [(KvKind::Key, &mut keys), (KvKind::Value, &mut values)] {
                pool.read_rows(kind, layer, physical, kh, 0, b, &mut scratch)?;
                for off in 0..b {
                    let at = ((logical * b + off) * h_k + kh) * d;
                    dst[at..at + d].copy_from_slice(&scratch[off * d..(off + 1) * d]);
                }
            }
        }
    }
    keys.truncate(t * h_k * d);
    values.truncate(t * h_k * d);
    let keys = Tensor::new(vec![t, h_k, d], keys)?;
    let values = Tensor::new(vec![t, h_k, d], values)?;
    let mut out = if grouped {
        gqa_attention(q, &keys, &values, cfg, false)?
    } else {
        let keys = expand_kv_heads(&keys, cfg)?;
        let values = expand_kv_heads(&values, cfg)?;
        reference_attention(q, &keys, &values, cfg, false)?
    };
    out.blocks_touched = span_blocks;
    Ok(out)
}
