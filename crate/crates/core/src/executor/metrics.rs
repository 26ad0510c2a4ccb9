use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::LayerAddress;
use crate::protocol::Pass;

/// One dispatched batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchRecord {
    pub layer: LayerAddress,
    pub pass: Pass,
    pub requests: usize,
    pub tokens: usize,
    pub dispatched_at: Duration,
    /// Longest time any member spent queued.
    pub max_wait: Duration,
}

/// Dispatch counters and histograms. Wait-time buckets are powers of two
/// in microseconds (bucket `b` holds waits in `[2^(b-1), 2^b)` µs, bucket 0
/// holds zero waits).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutorMetrics {
    pub batches: u64,
    pub requests: u64,
    pub tokens: u64,
    pub rejected: u64,
    pub dispatches_per_layer: BTreeMap<String, u64>,
    pub batch_size_histogram: BTreeMap<usize, u64>,
    pub wait_histogram_log2_us: BTreeMap<u32, u64>,
    /// Per-pass batch and request counts, keyed by pass name.
    pub per_pass: BTreeMap<String, (u64, u64)>,
}

impl ExecutorMetrics {
    pub fn record(&mut self, batch: &BatchRecord, waits: impl IntoIterator<Item = Duration>, rejected: usize) {
        self.batches += 1;
        self.requests += batch.requests as u64;
        self.tokens += batch.tokens as u64;
        self.rejected += rejected as u64;
        *self.dispatches_per_layer.entry(batch.layer.to_string()).or_default() += 1;
        *self.batch_size_histogram.entry(batch.requests).or_default() += 1;
        let e = self.per_pass.entry(batch.pass.to_string()).or_default();
        e.0 += 1;
        e.1 += batch.requests as u64;
        for w in waits {
            let us = w.as_micros() as u64;
            let bucket = 64 - us.leading_zeros();
            *self.wait_histogram_log2_us.entry(bucket).or_default() += 1;
        }
    }

    /// Requests per batch over every pass.
    pub fn mean_batch_size(&self) -> f64 {
        if self.batches == 0 {
            return 0.0;
        }
        self.requests as f64 / self.batches as f64
    }

    pub fn mean_batch_size_for(&self, pass: Pass) -> f64 {
        match self.per_pass.get(&pass.to_string()) {
            Some(&(b, r)) if b > 0 => r as f64 / b as f64,
            _ => 0.0,
        }
    }

    /// `(metric, key, value)` rows for CSV output.
    pub fn csv_rows(&self) -> Vec<[String; 3]> {
        let mut rows = vec![
            ["total".into(), "batches".into(), self.batches.to_string()],
            ["total".into(), "requests".into(), self.requests.to_string()],
            ["total".into(), "tokens".into(), self.tokens.to_string()],
            ["total".into(), "rejected".into(), self.rejected.to_string()],
            ["total".into(), "mean_batch_size".into(), format!("{:.4}", self.mean_batch_size())],
        ];
        for (k, v) in &self.batch_size_histogram {
            rows.push(["batch_size".into(), k.to_string(), v.to_string()]);
        }
        for (k, v) in &self.wait_histogram_log2_us {
            let upper = if *k == 0 { 0 } else { 1u64 << k };
            rows.push(["wait_us_lt".into(), upper.to_string(), v.to_string()]);
        }
        for (k, v) in &self.dispatches_per_layer {
            rows.push(["dispatches".into(), k.clone(), v.to_string()]);
        }
        rows
    }
}
