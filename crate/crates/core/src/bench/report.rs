use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::ModeCounters;
use crate::error::{Error, Result};

/// Fixed CSV column order.
pub const CSV_COLUMNS: [&str; 9] = [
    "mode",
    "total_latency_s",
    "throughput_tok_s",
    "p50_s",
    "p99_s",
    "blocks_allocated",
    "used_cache_bytes",
    "t_effective_cycles",
    "c_kernel",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelReport {
    /// Measured block re-reference fraction used as the hit rate.
    pub hit_rate: f64,
    pub t_effective_cycles: f64,
    pub batch_size: u64,
    /// Mean blocks read per sequence per decode step, rounded up.
    pub blocks_per_sequence: u64,
    pub c_kernel: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: String,
    pub total_latency_s: f64,
    pub throughput_tok_s: f64,
    pub p50_s: f64,
    pub p99_s: f64,
    pub blocks_allocated: usize,
    pub used_cache_bytes: u64,
    pub cost_model: Option<CostModelReport>,
    pub total_tokens: u64,
    pub generation_time_s: f64,
    pub latencies_s: Vec<f64>,
    pub workload_checksum: String,
    pub tokens: Vec<Vec<u32>>,
    pub blocks_touched_per_step: Vec<usize>,
    pub gather_span_per_step: Vec<usize>,
    pub counters: ModeCounters,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub config: serde_json::Value,
    pub seed: u64,
    /// Seconds since the Unix epoch when the run started.
    pub timestamp: u64,
    pub threads: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub modes: Vec<ModeReport>,
    pub environment: Environment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

/// One CSV row; empty cost-model cells mean the mode failed before any decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub mode: String,
    pub total_latency_s: f64,
    pub throughput_tok_s: f64,
    pub p50_s: f64,
    pub p99_s: f64,
    pub blocks_allocated: usize,
    pub used_cache_bytes: u64,
    pub t_effective_cycles: Option<f64>,
    pub c_kernel: Option<u64>,
}

impl From<&ModeReport> for CsvRow {
    fn from(m: &ModeReport) -> Self {
        Self {
            mode: m.mode.clone(),
            total_latency_s: m.total_latency_s,
            throughput_tok_s: m.throughput_tok_s,
            p50_s: m.p50_s,
            p99_s: m.p99_s,
            blocks_allocated: m.blocks_allocated,
            used_cache_bytes: m.used_cache_bytes,
            t_effective_cycles: m.cost_model.map(|c| c.t_effective_cycles),
            c_kernel: m.cost_model.map(|c| c.c_kernel),
        }
    }
}

fn fmt_err(what: &'static str, e: impl std::fmt::Display) -> Error {
    Error::Format {
        what,
        detail: e.to_string(),
    }
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| fmt_err("json report", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| fmt_err("json report", e))
    }

    /// Header plus one row per mode, columns as in [`CSV_COLUMNS`].
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(CSV_COLUMNS).map_err(|e| fmt_err("csv report", e))?;
        for m in &self.modes {
            w.serialize(CsvRow::from(m)).map_err(|e| fmt_err("csv report", e))?;
        }
        let bytes = w.into_inner().map_err(|e| fmt_err("csv report", e))?;
        String::from_utf8(bytes).map_err(|e| fmt_err("csv report", e))
    }
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| fmt_err("csv report", e))?
        .iter()
        .map(String::from)
        .collect();
    if header != CSV_COLUMNS {
        return Err(fmt_err("csv report", format!("unexpected columns {header:?}")));
    }
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| fmt_err("csv report", e))
}

pub fn emit_report(report: &BenchReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => report.to_csv()?,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Nearest-rank percentile of unsorted samples; 0 when empty.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}
