//! Analytical estimators reported next to measured benchmark numbers.
//! They never feed back into scheduling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::BlockTable;

pub const DEFAULT_T_CACHE: f64 = 20.0;
pub const DEFAULT_T_DRAM: f64 = 400.0;

/// Two-level memory: one cache level in front of DRAM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryHierarchyParams {
    pub hit_rate: f64,
    pub t_cache: f64,
    pub t_dram: f64,
}

impl Default for MemoryHierarchyParams {
    fn default() -> Self {
        Self {
            hit_rate: 0.0,
            t_cache: DEFAULT_T_CACHE,
            t_dram: DEFAULT_T_DRAM,
        }
    }
}

/// Hit-rate weighted access latency in cycles:
/// `H * T_cache + (1 - H) * T_dram`.
pub fn effective_access_latency(p: &MemoryHierarchyParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&p.hit_rate) {
        return Err(Error::InvalidArgument(format!(
            "hit rate {} outside [0, 1]",
            p.hit_rate
        )));
    }
    if !(p.t_cache > 0.0 && p.t_dram > 0.0 && p.t_cache <= p.t_dram) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < T_cache <= T_dram, got {} and {}",
            p.t_cache, p.t_dram
        )));
    }
    Ok(p.hit_rate * p.t_cache + (1.0 - p.hit_rate) * p.t_dram)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelLoadParams {
    pub batch_size: u64,
    pub blocks_per_sequence: u64,
    pub head_dim: u64,
}

impl KernelLoadParams {
    /// Reads `N_block` off a live table.
    pub fn from_table(batch_size: u64, table: &BlockTable, head_dim: u64) -> Self {
        Self {
            batch_size,
            blocks_per_sequence: table.num_blocks() as u64,
            head_dim,
        }
    }
}

/// `B * N_block * d^2`, exact.
pub fn kernel_load(p: &KernelLoadParams) -> Result<u64> {
    if p.batch_size == 0 || p.blocks_per_sequence == 0 || p.head_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel load parameters must be positive: {p:?}"
        )));
    }
    p.head_dim
        .checked_mul(p.head_dim)
        .and_then(|d2| d2.checked_mul(p.blocks_per_sequence))
        .and_then(|x| x.checked_mul(p.batch_size))
        .ok_or_else(|| Error::Overflow(format!("kernel load {p:?} exceeds u64")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_cache::{BlockPool, PoolConfig, Precision};

    fn mem(h: f64, c: f64, d: f64) -> MemoryHierarchyParams {
        MemoryHierarchyParams {
            hit_rate: h,
            t_cache: c,
            t_dram: d,
        }
    }

    #[test]
    fn latency_examples() {
        assert_eq!(effective_access_latency(&mem(1.0, 4.0, 400.0)).unwrap(), 4.0);
        assert_eq!(effective_access_latency(&mem(0.0, 4.0, 400.0)).unwrap(), 400.0);
        let v = effective_access_latency(&mem(0.9, 4.0, 400.0)).unwrap();
        assert!((v - 43.6).abs() < 1e-12);
        assert!(effective_access_latency(&mem(1.5, 4.0, 400.0)).is_err());
        assert!(effective_access_latency(&mem(-0.1, 4.0, 400.0)).is_err());
        assert!(effective_access_latency(&mem(0.5, 500.0, 400.0)).is_err());
    }

    #[test]
    fn latency_is_affine_and_decreasing() {
        let at = |h| effective_access_latency(&mem(h, 20.0, 400.0)).unwrap();
        let (a, b, c) = (at(0.2), at(0.5), at(0.8));
        assert!(a > b && b > c);
        assert!(((b - a) - (c - b)).abs() < 1e-9);
    }

    #[test]
    fn load_examples() {
        let k = |b, n, d| {
            kernel_load(&KernelLoadParams {
                batch_size: b,
                blocks_per_sequence: n,
                head_dim: d,
            })
        };
        assert_eq!(k(1, 1, 1).unwrap(), 1);
        assert_eq!(k(2, 3, 64).unwrap(), 24576);
        assert!(matches!(k(u64::MAX, 2, 2), Err(Error::Overflow(_))));
        assert!(k(0, 1, 1).is_err());
        for (b, n, d) in [(1, 5, 8), (3, 2, 16)] {
            assert_eq!(k(2 * b, n, d).unwrap(), 2 * k(b, n, d).unwrap());
            assert_eq!(k(b, 3 * n, d).unwrap(), 3 * k(b, n, d).unwrap());
        }
    }

    #[test]
    fn load_from_live_table() {
        let mut pool = BlockPool::new(PoolConfig {
            block_size: 16,
            num_kv_heads: 1,
            head_dim: 8,
            capacity: 8,
            num_layers: 1,
            precision: Precision::Fp32,
        })
        .unwrap();
        let mut t = BlockTable::new(0);
        pool.allocate_blocks(&mut t, 37).unwrap();
        let p = KernelLoadParams::from_table(1, &t, 8);
        assert_eq!(p.blocks_per_sequence, 3);
        assert_eq!(kernel_load(&p).unwrap(), 3 * 64);
    }
}
