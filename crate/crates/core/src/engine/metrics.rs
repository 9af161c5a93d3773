use crate::error::{Error, Result};

/// Sum of per-request latencies, with Neumaier compensation so long runs
/// of small samples do not drift.
pub fn total_latency(samples: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for &x in samples {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            carry += (sum - t) + x;
        } else {
            carry += (x - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Tokens per second.
pub fn generation_throughput(total_tokens: u64, generation_time_s: f64) -> Result<f64> {
    if !generation_time_s.is_finite() || generation_time_s <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "generation time must be positive, got {generation_time_s}"
        )));
    }
    Ok(total_tokens as f64 / generation_time_s)
}

/// `n_correct / n_total` as a percentage.
pub fn accuracy(n_correct: u64, n_total: u64) -> Result<f64> {
    if n_total == 0 {
        return Err(Error::InvalidArgument("accuracy over zero samples".into()));
    }
    if n_correct > n_total {
        return Err(Error::InvalidArgument(format!(
            "{n_correct} correct out of {n_total}"
        )));
    }
    Ok(n_correct as f64 / n_total as f64 * 100.0)
}
