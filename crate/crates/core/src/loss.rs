//! Target heatmaps and the sigmoid cross-entropy training loss.

use crate::tape::sigmoid_ce_element;
use crate::{Error, Real, Result, Tape, Tensor, Var};

/// 2D keypoints in pixel coordinates plus per-keypoint visibility.
///
/// Pixel `(x, y)` has its center at integer coordinates; points may fall
/// outside the image.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f64; 2]>, visible: Vec<bool>) -> Result<Self> {
        if points.len() != visible.len() {
            return Err(Error::Invalid(format!(
                "{} keypoints but {} visibility flags",
                points.len(),
                visible.len()
            )));
        }
        Ok(Self { points, visible })
    }

    pub fn all_visible(points: Vec<[f64; 2]>) -> Self {
        let visible = vec![true; points.len()];
        Self { points, visible }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// Renders one unnormalized Gaussian per keypoint into `[K, H, W]`:
/// `exp(-((x-u)^2 + (y-v)^2) / (2 sigma^2))`, whose peak value is 1.
///
/// Every keypoint is rendered regardless of its visibility flag.
pub fn render_heatmaps<T: Real>(
    kps: &KeypointSet,
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<Tensor<T>> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = Vec::with_capacity(kps.len() * height * width);
    for &[u, v] in &kps.points {
        let gx: Vec<f64> = (0..width).map(|x| (-(x as f64 - u).powi(2) * inv).exp()).collect();
        for y in 0..height {
            let gy = (-(y as f64 - v).powi(2) * inv).exp();
            data.extend(gx.iter().map(|&g| T::from_f64_lossy(g * gy)));
        }
    }
    Tensor::new(&[kps.len(), height, width], data)
}

/// Elementwise loss `x - x*z + log(1 + e^-x)` written literally.
///
/// Overflows for large negative `x`; kept as the reference formula.
pub fn sigmoid_ce_naive(x: f64, z: f64) -> f64 {
    x - x * z + (1.0 + (-x).exp()).ln()
}

/// Elementwise loss in overflow-free form.
pub fn sigmoid_ce_stable<T: Real>(x: T, z: T) -> T {
    sigmoid_ce_element(x, z)
}

/// Mean sigmoid cross-entropy of one heatmap stack, untracked.
pub fn sigmoid_ce_mean<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let l = tape.sigmoid_ce(x, target)?;
    Ok(tape.value(l).item())
}

/// Intermediate-supervision loss: per-stack mean cross-entropy summed over
/// every `(logits, target)` pair (frames x stacks).
pub fn sequence_loss<T: Real>(
    tape: &mut Tape<T>,
    pairs: &[(Var, &Tensor<T>)],
) -> Result<Var> {
    let terms = pairs
        .iter()
        .map(|&(x, z)| tape.sigmoid_ce(x, z))
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&terms)
}
