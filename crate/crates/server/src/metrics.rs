//! Counters, latency histograms and per-worker busy time.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

/// Upper bounds of the latency buckets, milliseconds.
const BUCKETS_MS: [f64; 14] = [1.0, 2.0, 5.0, 10.0, 25.0, 50.0, 100.0, 250.0, 500.0, 1000.0, 2500.0, 5000.0, 10000.0, 30000.0];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub count: u64,
    pub sum_ms: f64,
    pub max_ms: f64,
    /// Counts per bucket; the last slot holds values above every bound.
    pub buckets: Vec<u64>,
}

impl Histogram {
    fn observe(&mut self, ms: f64) {
        if self.buckets.is_empty() {
            self.buckets = vec![0; BUCKETS_MS.len() + 1];
        }
        let i = BUCKETS_MS.iter().position(|b| ms <= *b).unwrap_or(BUCKETS_MS.len());
        self.buckets[i] += 1;
        self.count += 1;
        self.sum_ms += ms;
        self.max_ms = self.max_ms.max(ms);
    }

    /// Bucket upper bound below which `q` of the observations fall.
    pub fn quantile_bound(&self, q: f64) -> Option<f64> {
        if self.count == 0 {
            return None;
        }
        let target = (q * self.count as f64).ceil().max(1.0) as u64;
        let mut acc = 0;
        for (i, c) in self.buckets.iter().enumerate() {
            acc += c;
            if acc >= target {
                return Some(BUCKETS_MS.get(i).copied().unwrap_or(self.max_ms));
            }
        }
        Some(self.max_ms)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerLoad {
    pub busy_ms: f64,
    pub handled: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub uptime_ms: u64,
    pub counters: BTreeMap<String, u64>,
    pub histograms: BTreeMap<String, Histogram>,
    pub workers: BTreeMap<String, WorkerLoad>,
}

impl MetricsSnapshot {
    pub fn counter(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0)
    }
}

pub struct Metrics {
    started: Instant,
    counters: Mutex<BTreeMap<String, u64>>,
    histograms: Mutex<BTreeMap<String, Histogram>>,
    workers: Mutex<BTreeMap<String, WorkerLoad>>,
}

impl Default for Metrics {
    fn default() -> Self {
        Metrics {
            started: Instant::now(),
            counters: Mutex::new(BTreeMap::new()),
            histograms: Mutex::new(BTreeMap::new()),
            workers: Mutex::new(BTreeMap::new()),
        }
    }
}

impl Metrics {
    pub fn inc(&self, name: &str) {
        self.add(name, 1);
    }

    pub fn add(&self, name: &str, n: u64) {
        let mut c = self.counters.lock();
        match c.get_mut(name) {
            Some(v) => *v += n,
            None => {
                c.insert(name.to_string(), n);
            }
        }
    }

    pub fn get(&self, name: &str) -> u64 {
        self.counters.lock().get(name).copied().unwrap_or(0)
    }

    pub fn observe_ms(&self, name: &str, ms: f64) {
        self.histograms.lock().entry(name.to_string()).or_default().observe(ms);
    }

    pub fn histogram(&self, name: &str) -> Histogram {
        self.histograms.lock().get(name).cloned().unwrap_or_default()
    }

    /// Account `busy` time to a worker, e.g. `central-0`.
    pub fn add_busy(&self, worker: &str, busy: Duration) {
        let mut w = self.workers.lock();
        let e = w.entry(worker.to_string()).or_default();
        e.busy_ms += busy.as_secs_f64() * 1000.0;
        e.handled += 1;
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            uptime_ms: self.started.elapsed().as_millis() as u64,
            counters: self.counters.lock().clone(),
            histograms: self.histograms.lock().clone(),
            workers: self.workers.lock().clone(),
        }
    }
}
