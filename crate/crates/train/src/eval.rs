//! Held-out PCK of a trained network.

use rhg_core::hourglass::{predict_sequence, HourglassWeights};
use rhg_core::loss::KeypointSet;
use rhg_core::metrics::{decode_keypoints, PckReport};
use rhg_core::Tensor;
use rhg_synth::dataset::Sequence;

use crate::{Error, Result};

pub const DEFAULT_ALPHAS: [f64; 2] = [0.05, 0.1];

/// Which ground-truth keypoints a report scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scoring {
    /// Visible keypoints only, the standard PCK.
    Visible,
    /// Occluded keypoints only, scored as if visible.
    Occluded,
}

/// Final-stack keypoint estimates for every frame of a sequence, with states
/// carried from frame to frame.
pub fn predict_keypoints(w: &HourglassWeights<Tensor<f32>>, seq: &Sequence) -> Result<Vec<Vec<[f64; 2]>>> {
    let maps = predict_sequence(w, &seq.frames)?;
    maps.iter()
        .map(|stacks| {
            let last = stacks.last().expect("network has stacks");
            Ok(decode_keypoints(last)?)
        })
        .collect()
}

fn check_compat(w: &HourglassWeights<Tensor<f32>>, seq: &Sequence) -> Result<()> {
    let k = w.config.keypoints;
    if let Some(l) = seq.labels.iter().find(|l| l.len() != k) {
        return Err(Error::KeypointMismatch {
            checkpoint: k,
            dataset: l.len(),
        });
    }
    Ok(())
}

/// PCK at each `alpha` over every frame of `sequences`.
pub fn evaluate(
    w: &HourglassWeights<Tensor<f32>>,
    sequences: &[Sequence],
    alphas: &[f64],
    scoring: Scoring,
) -> Result<PckReport> {
    let mut report = PckReport::new(alphas);
    for seq in sequences {
        check_compat(w, seq)?;
        let preds = predict_keypoints(w, seq)?;
        for (pred, (label, frame)) in preds.iter().zip(seq.labels.iter().zip(&seq.frames)) {
            let (_, h, wd) = frame.chw("evaluate")?;
            let gt = match scoring {
                Scoring::Visible => label.clone(),
                Scoring::Occluded => {
                    KeypointSet::new(label.points.clone(), label.visible.iter().map(|v| !v).collect())?
                }
            };
            report.add(pred, &gt, h.max(wd) as f64)?;
        }
    }
    Ok(report)
}
