use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::numerics::dot_unchecked;

/// Shape and seed of the synthetic decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            num_layers: 1,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 32,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn model_dim(&self) -> usize {
        self.num_query_heads * self.head_dim
    }

    pub fn attention(&self, block_size: usize) -> Result<AttentionConfig> {
        AttentionConfig::new(
            self.num_query_heads,
            self.num_kv_heads,
            self.head_dim,
            block_size,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.num_layers == 0 {
            return Err(Error::Config("vocab_size and num_layers must be >= 1".into()));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocab_size exceeds u32 token ids".into()));
        }
        self.attention(1).map(|_| ())
    }
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone)]
pub(crate) struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Self {
        let n = Normal::new(0.0f32, std).expect("std is positive");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| n.sample(rng)).collect(),
        }
    }

    pub(crate) fn rows(&self) -> usize {
        self.rows
    }

    pub(crate) fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn matvec(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot_unchecked(self.row(r), x);
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerWeights {
    pub(crate) wq: Matrix,
    pub(crate) wk: Matrix,
    pub(crate) wv: Matrix,
    pub(crate) wo: Matrix,
}

/// Attention-only decoder with fixed-seed Gaussian weights:
/// `x = embed[tok]`, then per layer `x += Wo * attn(Wq x, cache(Wk x, Wv x))`,
/// and `logits = W_out x`. No FFN, norms, or positional encoding.
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    pub(crate) embed: Matrix,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) head: Matrix,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dm = config.model_dim();
        let qd = config.num_query_heads * config.head_dim;
        let kd = config.num_kv_heads * config.head_dim;
        let proj = 1.0 / (dm as f32).sqrt();
        let embed = Matrix::gaussian(&mut rng, config.vocab_size, dm, 1.0);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: Matrix::gaussian(&mut rng, qd, dm, proj),
                wk: Matrix::gaussian(&mut rng, kd, dm, proj),
                wv: Matrix::gaussian(&mut rng, kd, dm, proj),
                wo: Matrix::gaussian(&mut rng, dm, qd, 1.0 / (qd as f32).sqrt()),
            })
            .collect();
        let head = Matrix::gaussian(&mut rng, config.vocab_size, dm, proj);
        Ok(Self {
            config,
            embed,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn embed(&self, token: u32) -> Result<Vec<f32>> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(self.embed.row(token as usize).to_vec())
    }

    pub fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.config.vocab_size];
        self.head.matvec(hidden, &mut out);
        out
    }

    /// Bit patterns of every weight, for determinism checks.
    pub fn weight_fingerprint(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.embed.data.iter().map(|x| x.to_bits()).collect();
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo] {
                out.extend(m.data.iter().map(|x| x.to_bits()));
            }
        }
        out.extend(self.head.data.iter().map(|x| x.to_bits()));
        out
    }
}
