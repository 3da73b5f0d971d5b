//! Per-frame inference timing with recurrent states carried.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhg_core::cell::CellKind;
use rhg_core::hourglass::{HourglassWeights, NetConfig, Runner};
use rhg_core::Tensor;

use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub image_channels: usize,
    pub channels: usize,
    pub keypoints: usize,
    pub warmup: usize,
    /// Timed frames per cell kind.
    pub frames: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            image_channels: 3,
            channels: 36,
            keypoints: 36,
            warmup: 3,
            frames: 60,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchEntry {
    pub cell: CellKind,
    pub median_ms: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn median_ms(&self, cell: CellKind) -> Option<f64> {
        self.entries.iter().find(|e| e.cell == cell).map(|e| e.median_ms)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "bench cell={} median_ms={:.3} frames={}", e.cell, e.median_ms, e.samples)?;
        }
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times single-frame forward passes of each network. Every network sees
/// the same frames.
pub fn bench_weights(nets: &[HourglassWeights<Tensor<f32>>], cfg: &BenchConfig) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frames: Vec<Tensor<f32>> = (0..cfg.frames.max(1))
        .map(|_| Tensor::uniform(&[cfg.image_channels, cfg.height, cfg.width], 0.0, 1.0, &mut rng))
        .collect();
    let mut runners: Vec<Runner<f32>> = nets.iter().map(Runner::new).collect();
    for r in &mut runners {
        for f in frames.iter().cycle().take(cfg.warmup) {
            r.step(f)?;
        }
    }
    let mut times = vec![Vec::new(); nets.len()];
    // kinds alternate frame by frame, starting kind rotating, so drifts in
    // machine speed hit every kind alike
    for (n, f) in frames.iter().enumerate() {
        for j in 0..runners.len() {
            let i = (n + j) % runners.len();
            let t0 = Instant::now();
            std::hint::black_box(runners[i].step(f)?);
            times[i].push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(BenchReport {
        entries: nets
            .iter()
            .zip(times)
            .map(|(n, t)| BenchEntry {
                cell: n.config.cell,
                samples: t.len(),
                median_ms: median(t),
            })
            .collect(),
    })
}

/// Xavier-initialized networks of each requested kind at `cfg`'s shape.
pub fn bench(cells: &[CellKind], cfg: &BenchConfig) -> Result<BenchReport> {
    let nets = cells
        .iter()
        .map(|&c| {
            let net = NetConfig::new(cfg.image_channels, cfg.channels, cfg.keypoints, c);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Ok(HourglassWeights::xavier(net, &mut rng)?)
        })
        .collect::<Result<Vec<_>>>()?;
    bench_weights(&nets, cfg)
}
