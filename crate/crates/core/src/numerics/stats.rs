use serde::{Deserialize, Serialize};

pub const NORMALIZE_EPS: f64 = 1e-8;

/// Welford-style running mean/variance for one scalar stream.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn update_batch(&mut self, xs: &[f64]) {
        for &x in xs {
            self.update(x);
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance; 0 before two updates.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    /// (x - mean) / sqrt(var + 1e-8). Callers should have pushed at least
    /// two samples first; with fewer, this degenerates to centering.
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / (self.variance() + NORMALIZE_EPS).sqrt()
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * (self.variance() + NORMALIZE_EPS).sqrt() + self.mean
    }

    /// Serialize as raw (count, mean, m2) so checkpoints round-trip bit-exactly.
    pub fn raw(&self) -> (u64, f64, f64) {
        (self.count, self.mean, self.m2)
    }

    pub fn from_raw(count: u64, mean: f64, m2: f64) -> Self {
        RunningStats { count, mean, m2 }
    }
}
