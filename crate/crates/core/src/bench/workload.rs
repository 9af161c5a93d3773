use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::Request;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KVWL";
const VERSION: u32 = 1;
const MAX_REJECTIONS: usize = 100_000;

/// Prompt-length distribution. Lognormal lengths are rounded to the
/// nearest integer and redrawn until they fall in `[1, max_len]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDistribution {
    Fixed { len: usize },
    Uniform { min: usize, max: usize },
    Lognormal { mu: f64, sigma: f64, max_len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub num_requests: usize,
    pub prompt_len: LengthDistribution,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            num_requests: 8,
            prompt_len: LengthDistribution::Uniform { min: 16, max: 128 },
            max_new_tokens: 32,
            seed: 0,
        }
    }
}

enum Sampler {
    Fixed(usize),
    Uniform(usize, usize),
    Lognormal(LogNormal<f64>, usize),
}

impl Sampler {
    fn new(dist: &LengthDistribution) -> Result<Self> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *dist {
            LengthDistribution::Fixed { len: 0 } => bad("fixed prompt length 0".into()),
            LengthDistribution::Fixed { len } => Ok(Self::Fixed(len)),
            LengthDistribution::Uniform { min, max } if min == 0 || min > max => {
                bad(format!("uniform prompt lengths need 1 <= min <= max, got [{min}, {max}]"))
            }
            LengthDistribution::Uniform { min, max } => Ok(Self::Uniform(min, max)),
            LengthDistribution::Lognormal { mu, sigma, max_len } => {
                if max_len == 0 || !mu.is_finite() {
                    return bad(format!("lognormal needs finite mu and max_len >= 1, got {mu}, {max_len}"));
                }
                let d = LogNormal::new(mu, sigma)
                    .map_err(|e| Error::Config(format!("lognormal({mu}, {sigma}): {e}")))?;
                if sigma.is_nan() || sigma <= 0.0 {
                    return bad(format!("lognormal sigma must be positive, got {sigma}"));
                }
                Ok(Self::Lognormal(d, max_len))
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<usize> {
        match *self {
            Self::Fixed(n) => Ok(n),
            Self::Uniform(lo, hi) => Ok(rng.random_range(lo..=hi)),
            Self::Lognormal(d, max_len) => {
                for _ in 0..MAX_REJECTIONS {
                    let x = d.sample(rng).round();
                    if x >= 1.0 && x <= max_len as f64 {
                        return Ok(x as usize);
                    }
                }
                Err(Error::Config(format!(
                    "lognormal rarely lands in [1, {max_len}]; widen max_len"
                )))
            }
        }
    }
}

/// Requests with ids `0..n`, in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub requests: Vec<Request>,
}

/// Draws prompts for `spec`; token ids are uniform over `[0, vocab_size)`.
pub fn generate_workload(spec: &WorkloadSpec, vocab_size: usize) -> Result<Workload> {
    if vocab_size == 0 || vocab_size > u32::MAX as usize {
        return Err(Error::Config(format!("vocab_size {vocab_size} out of range")));
    }
    let sampler = Sampler::new(&spec.prompt_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut requests = Vec::with_capacity(spec.num_requests);
    for id in 0..spec.num_requests as u64 {
        let len = sampler.sample(&mut rng)?;
        let prompt = (0..len)
            .map(|_| rng.random_range(0..vocab_size as u32))
            .collect();
        requests.push(Request {
            id,
            prompt,
            max_new_tokens: spec.max_new_tokens,
        });
    }
    Ok(Workload { requests })
}

impl Workload {
    /// `KVWL`, u32 version, u32 count, then per request u32 max_new_tokens,
    /// u32 prompt length and the prompt ids; all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.requests.len() as u32).to_le_bytes());
        for r in &self.requests {
            out.extend_from_slice(&(r.max_new_tokens as u32).to_le_bytes());
            out.extend_from_slice(&(r.prompt.len() as u32).to_le_bytes());
            for t in &r.prompt {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |detail: &str| Error::Format {
            what: "workload",
            detail: detail.to_string(),
        };
        let mut words = bytes
            .get(4..)
            .filter(|_| &bytes[..4] == MAGIC)
            .ok_or_else(|| fail("missing KVWL magic"))?
            .chunks(4);
        if words.len() * 4 != bytes.len() - 4 {
            return Err(fail("length is not a whole number of words"));
        }
        let mut next = || -> Result<u32> {
            words
                .next()
                .map(|w| u32::from_le_bytes(w.try_into().expect("4-byte chunk")))
                .ok_or_else(|| fail("truncated"))
        };
        if next()? != VERSION {
            return Err(fail("unsupported version"));
        }
        let count = next()? as usize;
        let mut requests = Vec::with_capacity(count.min(1 << 16));
        for id in 0..count as u64 {
            let max_new_tokens = next()? as usize;
            let len = next()? as usize;
            let prompt = (0..len).map(|_| next()).collect::<Result<Vec<u32>>>()?;
            requests.push(Request {
                id,
                prompt,
                max_new_tokens,
            });
        }
        if next().is_ok() {
            return Err(fail("trailing data"));
        }
        Ok(Self { requests })
    }

    /// Hex SHA-256 of the binary encoding.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn total_prompt_tokens(&self) -> usize {
        self.requests.iter().map(|r| r.prompt.len()).sum()
    }
}
