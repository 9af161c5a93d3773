//! Attention engine with a block-paged FP8 KV cache, grouped-query
//! attention and valid-block paged attention, plus the analytical cost
//! model and benchmark plumbing used to compare them.

pub mod attention;
pub mod bench;
pub mod cost_model;
pub mod engine;
pub mod error;
pub mod fp8;
pub mod kv_cache;
pub mod numerics;

pub use attention::{
    gqa_attention, paged_attention, query_group_of, reference_attention, AttentionConfig,
    AttentionOutput, Grouping,
};
pub use cost_model::{
    effective_access_latency, kernel_load, KernelLoadParams, MemoryHierarchyParams,
};
pub use engine::{
    accuracy, generation_throughput, total_latency, Engine, EngineOptions, OptimizationMode,
    Request, RunMetrics, SequenceState, ToyModel, ToyModelConfig,
};
pub use error::{Error, Result};
pub use fp8::{dequantize_block, quantize_block, Fp8Block, Fp8Code};
pub use kv_cache::{
    BlockPool, BlockTable, GatheredKv, PoolConfig, Precision, SkipSet, SlotMapping, WriteReport,
};
pub use numerics::{argmax, block_sum_reduce, dot, stable_softmax, Tensor};
