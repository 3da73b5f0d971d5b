//! Heatmap decoding and the PCK metric.

use std::fmt;

use crate::loss::KeypointSet;
use crate::{Error, Real, Result, Tensor};

/// Per-channel argmax of `[K, H, W]` heatmaps as `(x, y)` pixel coordinates.
///
/// Ties resolve to the smallest row-major index.
pub fn decode_keypoints<T: Real>(heatmaps: &Tensor<T>) -> Result<Vec<[f64; 2]>> {
    let (k, h, w) = heatmaps.chw("decode_keypoints")?;
    let plane = h * w;
    Ok((0..k)
        .map(|c| {
            let chan = &heatmaps.data()[c * plane..(c + 1) * plane];
            let mut best = 0;
            for (i, &v) in chan.iter().enumerate() {
                if v > chan[best] {
                    best = i;
                }
            }
            if plane == 0 {
                [0.0, 0.0]
            } else {
                [(best % w) as f64, (best / w) as f64]
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PckConfig {
    pub alpha: f64,
    /// Reference length, the larger image dimension.
    pub reference: f64,
}

impl PckConfig {
    pub fn new(alpha: f64, reference: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Invalid(format!("alpha must be in (0, 1], got {alpha}")));
        }
        if !(reference > 0.0) {
            return Err(Error::Invalid(format!("reference length must be positive, got {reference}")));
        }
        Ok(Self { alpha, reference })
    }

    pub fn for_image(alpha: f64, height: usize, width: usize) -> Result<Self> {
        Self::new(alpha, height.max(width) as f64)
    }

    pub fn radius(&self) -> f64 {
        self.alpha * self.reference
    }
}

/// Correct and visible keypoint counts for one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PckCount {
    pub correct: usize,
    pub visible: usize,
}

impl PckCount {
    /// `correct / visible`, or `None` when no keypoint is visible.
    pub fn fraction(&self) -> Option<f64> {
        (self.visible > 0).then(|| self.correct as f64 / self.visible as f64)
    }

    pub fn merge(&mut self, other: PckCount) {
        self.correct += other.correct;
        self.visible += other.visible;
    }
}

/// Counts visible ground-truth keypoints whose prediction lies within
/// `alpha * L` (inclusive).
pub fn pck_count(pred: &[[f64; 2]], gt: &KeypointSet, cfg: &PckConfig) -> Result<PckCount> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "{} predicted keypoints for {} ground-truth keypoints",
            pred.len(),
            gt.len()
        )));
    }
    let radius = cfg.radius();
    let mut count = PckCount::default();
    for ((p, g), &vis) in pred.iter().zip(&gt.points).zip(&gt.visible) {
        if !vis {
            continue;
        }
        count.visible += 1;
        if (p[0] - g[0]).hypot(p[1] - g[1]) <= radius {
            count.correct += 1;
        }
    }
    Ok(count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PckError {
    NoVisibleKeypoints,
}

impl fmt::Display for PckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("no visible keypoints")
    }
}

/// Fraction of visible keypoints predicted within `alpha * L`.
///
/// The outer error is for malformed input; the inner one reports an instance
/// with nothing to score.
pub fn pck(
    pred: &[[f64; 2]],
    gt: &KeypointSet,
    cfg: &PckConfig,
) -> Result<std::result::Result<f64, PckError>> {
    Ok(pck_count(pred, gt, cfg)?
        .fraction()
        .ok_or(PckError::NoVisibleKeypoints))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PckEntry {
    pub alpha: f64,
    pub count: PckCount,
}

/// PCK accumulated over a dataset at several thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct PckReport {
    pub entries: Vec<PckEntry>,
}

impl PckReport {
    pub fn new(alphas: &[f64]) -> Self {
        Self {
            entries: alphas
                .iter()
                .map(|&alpha| PckEntry {
                    alpha,
                    count: PckCount::default(),
                })
                .collect(),
        }
    }

    pub fn add(&mut self, pred: &[[f64; 2]], gt: &KeypointSet, reference: f64) -> Result<()> {
        for e in &mut self.entries {
            let cfg = PckConfig::new(e.alpha, reference)?;
            e.count.merge(pck_count(pred, gt, &cfg)?);
        }
        Ok(())
    }

    pub fn value(&self, alpha: f64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.alpha == alpha)
            .and_then(|e| e.count.fraction())
    }

    /// One `pck alpha=<a> value=<v> n_visible=<n>` line per threshold.
    pub fn machine_lines(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let v = e
                .count
                .fraction()
                .map_or_else(|| "nan".to_string(), |f| format!("{f:.6}"));
            s.push_str(&format!(
                "pck alpha={} value={v} n_visible={}\n",
                e.alpha, e.count.visible
            ));
        }
        s
    }
}

impl fmt::Display for PckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8}  {:>8}  {:>9}  {:>9}", "alpha", "PCK", "correct", "visible")?;
        for e in &self.entries {
            let v = e
                .count
                .fraction()
                .map_or_else(|| "-".to_string(), |p| format!("{:.2}%", 100.0 * p));
            writeln!(
                f,
                "{:>8}  {:>8}  {:>9}  {:>9}",
                e.alpha, v, e.count.correct, e.count.visible
            )?;
        }
        Ok(())
    }
}
