//! TOML run configuration.
//!
//! ```toml
//! [model]
//! vocab_size = 256
//! num_layers = 1
//! H_q = 4
//! H_k = 2
//! d = 32
//! seed = 0
//!
//! [cache]
//! B = 16
//! capacity = 4096          # optional; sized to the workload when absent
//! precision = { original = "fp32", coopt = "fp8" }   # optional, checked
//!
//! [workload]
//! num_requests = 8
//! max_new_tokens = 32
//! seed = 0
//! prompt_len = { kind = "lognormal", mu = 4.0, sigma = 1.0, max_len = 1024 }
//!
//! [cost_model]
//! T_cache = 20.0
//! T_DRAM = 400.0
//!
//! [run]
//! modes = ["original", "coopt"]
//! format = "json"
//! out = "report.json"
//! warmup = 1
//! repeats = 1
//! max_batch_size = 0
//! skip_duplicate_tokens = false
//! parallel = true
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use coopt_core::bench::{BenchConfig, CostModelConfig, ReportFormat, WorkloadSpec};
use coopt_core::kv_cache::{Precision, DEFAULT_BLOCK_SIZE};
use coopt_core::{EngineOptions, OptimizationMode, ToyModelConfig};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub num_layers: usize,
    #[serde(rename = "H_q")]
    pub num_query_heads: usize,
    #[serde(rename = "H_k")]
    pub num_kv_heads: usize,
    #[serde(rename = "d")]
    pub head_dim: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ToyModelConfig::default();
        Self {
            vocab_size: m.vocab_size,
            num_layers: m.num_layers,
            num_query_heads: m.num_query_heads,
            num_kv_heads: m.num_kv_heads,
            head_dim: m.head_dim,
            seed: m.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    #[serde(rename = "B")]
    pub block_size: usize,
    pub capacity: Option<usize>,
    /// Each mode has a fixed cache precision; entries here must agree.
    pub precision: BTreeMap<String, Precision>,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            capacity: None,
            precision: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModelSection {
    #[serde(rename = "T_cache")]
    pub t_cache: f64,
    #[serde(rename = "T_DRAM")]
    pub t_dram: f64,
}

impl Default for CostModelSection {
    fn default() -> Self {
        let c = CostModelConfig::default();
        Self {
            t_cache: c.t_cache,
            t_dram: c.t_dram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub modes: Vec<String>,
    pub format: ReportFormat,
    pub out: Option<PathBuf>,
    pub warmup: usize,
    pub repeats: usize,
    pub max_batch_size: usize,
    pub skip_duplicate_tokens: bool,
    pub parallel: bool,
    /// Pre-generated workload file used instead of `[workload]`.
    pub workload_file: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        let e = EngineOptions::default();
        Self {
            modes: vec!["original".into(), "coopt".into()],
            format: ReportFormat::Json,
            out: None,
            warmup: 1,
            repeats: 1,
            max_batch_size: e.max_batch_size,
            skip_duplicate_tokens: e.skip_duplicate_tokens,
            parallel: e.parallel,
            workload_file: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub cache: CacheSection,
    pub workload: WorkloadSpec,
    pub cost_model: CostModelSection,
    pub run: RunSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn modes(&self) -> Result<Vec<OptimizationMode>> {
        let modes = self
            .run
            .modes
            .iter()
            .map(|m| m.parse::<OptimizationMode>())
            .collect::<Result<Vec<_>, _>>()?;
        if modes.is_empty() {
            bail!("no modes selected");
        }
        for (name, precision) in &self.cache.precision {
            let mode: OptimizationMode = name.parse()?;
            if mode.precision() != *precision {
                bail!(
                    "cache.precision.{name} = {precision:?}, but {mode} always uses {:?}",
                    mode.precision()
                );
            }
        }
        Ok(modes)
    }

    pub fn bench_config(&self) -> BenchConfig {
        let m = &self.model;
        BenchConfig {
            model: ToyModelConfig {
                vocab_size: m.vocab_size,
                num_layers: m.num_layers,
                num_query_heads: m.num_query_heads,
                num_kv_heads: m.num_kv_heads,
                head_dim: m.head_dim,
                seed: m.seed,
            },
            block_size: self.cache.block_size,
            capacity: self.cache.capacity,
            engine: EngineOptions {
                max_batch_size: self.run.max_batch_size,
                skip_duplicate_tokens: self.run.skip_duplicate_tokens,
                parallel: self.run.parallel,
            },
            warmup: self.run.warmup,
            repeats: self.run.repeats,
            cost_model: CostModelConfig {
                t_cache: self.cost_model.t_cache,
                t_dram: self.cost_model.t_dram,
            },
        }
    }
}
