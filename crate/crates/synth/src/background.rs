//! Procedural backgrounds: gradients, stripes and rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rhg_core::Tensor;

/// Background `id` of the pool identified by `pool_seed`, values in [0, 1].
pub fn background(pool_seed: u64, id: usize, channels: usize, height: usize, width: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(pool_seed);
    rng.set_stream(id as u64);
    let base: f64 = rng.gen_range(0.15..0.85);
    let tint: Vec<f64> = (0..channels).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let (gx, gy): (f64, f64) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let waves: Vec<[f64; 4]> = (0..2)
        .map(|_| {
            [
                rng.gen_range(0.05..0.15),
                rng.gen_range(0.1..0.8),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::PI),
            ]
        })
        .collect();
    let rects: Vec<[f64; 5]> = (0..4)
        .map(|_| {
            let (x0, y0) = (rng.gen_range(0.0..width as f64), rng.gen_range(0.0..height as f64));
            [
                x0,
                y0,
                x0 + rng.gen_range(2.0..width as f64 / 2.0),
                y0 + rng.gen_range(2.0..height as f64 / 2.0),
                rng.gen_range(-0.25..0.25),
            ]
        })
        .collect();
    let mut data = Vec::with_capacity(channels * height * width);
    for t in &tint {
        for y in 0..height {
            for x in 0..width {
                let (fx, fy) = (x as f64 / width as f64, y as f64 / height as f64);
                let mut v = base + t + gx * (fx - 0.5) + gy * (fy - 0.5);
                for [amp, freq, phase, angle] in &waves {
                    let s = x as f64 * angle.cos() + y as f64 * angle.sin();
                    v += amp * (freq * s + phase).sin();
                }
                for [x0, y0, x1, y1, dv] in &rects {
                    if (*x0..*x1).contains(&(x as f64)) && (*y0..*y1).contains(&(y as f64)) {
                        v += dv;
                    }
                }
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(&[channels, height, width], data).expect("background size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_distinct_and_bounded() {
        let a = background(9, 0, 1, 16, 24);
        assert_eq!(a, background(9, 0, 1, 16, 24));
        assert_ne!(a, background(9, 1, 1, 16, 24));
        assert_ne!(a, background(10, 0, 1, 16, 24));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(background(9, 0, 3, 16, 24).shape(), &[3, 16, 24]);
    }
}
