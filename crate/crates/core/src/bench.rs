//! Inference latency measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::ImageSample;
use crate::error::{Error, Result};
use crate::metrics::AnomalyModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_samples: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

impl LatencyReport {
    /// Summarizes per-sample timings in milliseconds. Percentiles use the
    /// nearest-rank rule on the sorted timings.
    pub fn from_timings(timings_ms: &[f64], warmup: usize) -> Result<Self> {
        if timings_ms.is_empty() {
            return Err(Error::InvalidInput("no timed samples".into()));
        }
        let mut sorted = timings_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let rank = |q: f64| sorted[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        let mean = sorted.iter().sum::<f64>() / n as f64;
        Ok(Self { n_samples: n, warmup, mean_ms: mean, median_ms: median, p95_ms: rank(0.95), fps: 1000.0 / mean })
    }

    pub fn to_markdown(&self) -> String {
        format!(
            "| samples | warmup | mean ms | median ms | p95 ms | FPS |\n|---|---|---|---|---|---|\n| {} | {} | {:.2} | {:.2} | {:.2} | {:.1} |\n",
            self.n_samples, self.warmup, self.mean_ms, self.median_ms, self.p95_ms, self.fps
        )
    }
}

/// Times single-sample predictions. The first `warmup` calls run but are not
/// recorded; samples are cycled when `n_samples` exceeds their count.
pub fn measure_latency(
    model: &dyn AnomalyModel,
    samples: &[&ImageSample],
    n_samples: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if samples.is_empty() || n_samples == 0 {
        return Err(Error::InvalidInput("benchmark needs at least one sample".into()));
    }
    let mut timings = Vec::with_capacity(n_samples);
    for i in 0..warmup + n_samples {
        let s = samples[i % samples.len()];
        let t0 = Instant::now();
        model.predict(&[s])?;
        if i >= warmup {
            timings.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    LatencyReport::from_timings(&timings, warmup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ConstantModel;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn summary_statistics() -> Result<()> {
        let t: Vec<f64> = (1..=20).map(f64::from).collect();
        let r = LatencyReport::from_timings(&t, 3)?;
        assert_eq!(r.mean_ms, 10.5);
        assert_eq!(r.median_ms, 10.5);
        assert_eq!(r.p95_ms, 19.0);
        assert!((r.fps - 1000.0 / 10.5).abs() < 1e-12);
        assert_eq!(LatencyReport::from_timings(&[4.0, 1.0, 2.0], 0)?.median_ms, 2.0);
        Ok(())
    }

    struct Counting(AtomicUsize);

    impl AnomalyModel for Counting {
        fn predict(&self, samples: &[&ImageSample]) -> Result<Vec<Vec<f32>>> {
            self.0.fetch_add(1, Ordering::Relaxed);
            ConstantModel(0.0).predict(samples)
        }
    }

    #[test]
    fn warmup_calls_are_not_timed() -> Result<()> {
        let s = ImageSample::constant("a", [0.5; 3]);
        let m = Counting(AtomicUsize::new(0));
        let r = measure_latency(&m, &[&s], 10, 4)?;
        assert_eq!(m.0.load(Ordering::Relaxed), 14);
        assert_eq!(r.n_samples, 10);
        assert!(r.mean_ms >= 0.0 && r.p95_ms >= r.median_ms);
        Ok(())
    }
}
