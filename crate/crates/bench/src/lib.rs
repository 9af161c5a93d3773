//! Shared fixtures for the criterion benches.

use coopt_core::{
    BlockPool, Engine, EngineOptions, OptimizationMode, Request, SequenceState, ToyModel,
    ToyModelConfig,
};

pub const BLOCK_SIZE: usize = 16;

pub fn model() -> ToyModel {
    ToyModel::new(ToyModelConfig::default()).expect("default model config is valid")
}

/// `n` requests with distinct prompts of `prompt_len` tokens.
pub fn requests(n: usize, prompt_len: usize, max_new_tokens: usize) -> Vec<Request> {
    (0..n)
        .map(|i| Request {
            id: i as u64,
            prompt: (0..prompt_len).map(|t| ((i * 31 + t * 7) % 256) as u32).collect(),
            max_new_tokens,
        })
        .collect()
}

/// A pool sized for `requests` under `mode`.
pub fn pool_for(engine: &Engine<'_>, requests: &[Request]) -> BlockPool {
    let need = coopt_core::engine::required_blocks(requests, BLOCK_SIZE);
    BlockPool::new(engine.pool_config(BLOCK_SIZE, need)).expect("pool config is valid")
}

/// Prefilled sequences for `requests`, ready for decode.
pub fn prefilled(
    model: &ToyModel,
    mode: OptimizationMode,
    requests: &[Request],
) -> (BlockPool, Vec<SequenceState>) {
    let engine = Engine::new(model, mode, EngineOptions::default());
    let mut pool = pool_for(&engine, requests);
    let mut states: Vec<_> = requests.iter().map(SequenceState::new).collect();
    engine.prefill(&mut states, &mut pool).expect("prefill fits the pool");
    (pool, states)
}
