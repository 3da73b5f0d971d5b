//! Orbit cameras, pinhole projection and constant-velocity trajectories.

use nalgebra::Matrix3;
use rand::Rng;

use crate::geometry::{ObjectModel, Vec3};
use crate::{Error, Result};

/// Camera-frame depths at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Principal point at the image centre; pixel centres sit at integer
    /// coordinates, so the centre is `((W-1)/2, (H-1)/2)`.
    pub fn centered(focal: f64, height: usize, width: usize) -> Self {
        Self {
            focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    /// The same view on a grid `factor` times finer; pixel `(u, v)` maps to
    /// `((u + 0.5) factor - 0.5, (v + 0.5) factor - 0.5)`.
    pub fn scaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            focal: self.focal * f,
            cx: (self.cx + 0.5) * f - 0.5,
            cy: (self.cy + 0.5) * f - 0.5,
        }
    }

    /// Focal length giving horizontal field of view `fov` (radians).
    pub fn from_fov(fov: f64, height: usize, width: usize) -> Self {
        Self::centered(width as f64 / (2.0 * (fov / 2.0).tan()), height, width)
    }
}

/// Camera on a sphere around the origin, looking at the origin with world +z
/// as up. Camera axes: x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn new(azimuth: f64, elevation: f64, distance: f64, intrinsics: Intrinsics) -> Self {
        Self {
            azimuth,
            elevation,
            distance,
            intrinsics,
        }
    }

    pub fn position(&self) -> Vec3 {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        self.distance * Vec3::new(ce * ca, ce * sa, se)
    }

    /// World-to-camera rotation; rows are the camera axes in world frame.
    pub fn rotation(&self) -> Matrix3<f64> {
        let forward = -self.position().normalize();
        let right = forward.cross(&Vec3::z()).normalize();
        let down = forward.cross(&right);
        Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation() * (p - self.position())
    }

    /// Pixel coordinates `(u, v)` of a camera-frame point.
    pub fn project_camera(&self, pc: &Vec3) -> [f64; 2] {
        let k = &self.intrinsics;
        [k.focal * pc.x / pc.z + k.cx, k.focal * pc.y / pc.z + k.cy]
    }

    pub fn is_valid(&self) -> bool {
        self.distance > 0.0
            && self.elevation.abs() < std::f64::consts::FRAC_PI_2 - 1e-3
            && self.intrinsics.focal > 0.0
    }
}

/// Pixel positions and camera-frame depths of every model keypoint.
pub fn project_keypoints(model: &ObjectModel, pose: &CameraPose) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
    let mut uv = Vec::with_capacity(model.keypoints.len());
    let mut depth = Vec::with_capacity(model.keypoints.len());
    let rot = pose.rotation();
    let eye = pose.position();
    for (index, k) in model.keypoints.iter().enumerate() {
        let pc = rot * (k - eye);
        if pc.z <= MIN_DEPTH {
            return Err(Error::BehindCamera { index, depth: pc.z });
        }
        uv.push(pose.project_camera(&pc));
        depth.push(pc.z);
    }
    Ok((uv, depth))
}

/// Closed interval sampled uniformly; `lo == hi` is a constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::Config(format!("empty range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn constant(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryConfig {
    pub azimuth: Range,
    pub elevation: Range,
    pub distance: Range,
    pub d_azimuth: Range,
    pub d_elevation: Range,
    pub d_distance: Range,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            azimuth: Range::new(0.0, std::f64::consts::TAU).unwrap(),
            elevation: Range::new(0.0, std::f64::consts::FRAC_PI_6).unwrap(),
            distance: Range::new(2.4, 3.0).unwrap(),
            d_azimuth: Range::new(-0.15, 0.15).unwrap(),
            d_elevation: Range::new(-0.02, 0.02).unwrap(),
            d_distance: Range::new(-0.05, 0.05).unwrap(),
        }
    }
}

impl TrajectoryConfig {
    /// Rejects ranges that could put a camera of a `frames`-long trajectory
    /// at the poles or at non-positive distance.
    pub fn validate(&self, frames: usize) -> Result<()> {
        let steps = frames.saturating_sub(1) as f64;
        let el_lo = self.elevation.lo + steps * self.d_elevation.lo.min(0.0);
        let el_hi = self.elevation.hi + steps * self.d_elevation.hi.max(0.0);
        let limit = std::f64::consts::FRAC_PI_2 - 1e-3;
        if el_lo <= -limit || el_hi >= limit {
            return Err(Error::Config(format!(
                "elevation may leave ({}, {limit}) over {frames} frames",
                -limit
            )));
        }
        if self.distance.lo + steps * self.d_distance.lo.min(0.0) <= 0.0 {
            return Err(Error::Config(format!(
                "distance may reach zero over {frames} frames"
            )));
        }
        Ok(())
    }
}

/// `frames` poses: a uniform initial viewpoint plus one increment drawn once
/// and applied every frame.
pub fn sample_trajectory<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &TrajectoryConfig,
    frames: usize,
    intrinsics: Intrinsics,
) -> Result<Vec<CameraPose>> {
    cfg.validate(frames)?;
    let start = [cfg.azimuth, cfg.elevation, cfg.distance].map(|r| r.sample(rng));
    let step = [cfg.d_azimuth, cfg.d_elevation, cfg.d_distance].map(|r| r.sample(rng));
    Ok((0..frames)
        .map(|t| {
            let t = t as f64;
            CameraPose::new(
                start[0] + t * step[0],
                start[1] + t * step[1],
                start[2] + t * step[2],
                intrinsics,
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics::centered(40.0, 32, 32)
    }

    #[test]
    fn rotation_is_orthonormal_and_looks_at_origin() {
        let pose = CameraPose::new(0.7, 0.3, 2.5, intr());
        let r = pose.rotation();
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        let origin = pose.to_camera(&Vec3::zeros());
        assert!(origin.x.abs() < 1e-12 && origin.y.abs() < 1e-12);
        assert!((origin.z - 2.5).abs() < 1e-12);
        // world up maps to image up (negative v)
        assert!(pose.to_camera(&Vec3::z()).y < 0.0);
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        for d in [1.0, 2.0, 7.5] {
            let pose = CameraPose::new(1.1, 0.2, d, intr());
            let mut m = ObjectModel::empty();
            m.keypoints = vec![Vec3::zeros(), pose.position() * 0.5];
            let (uv, z) = project_keypoints(&m, &pose).unwrap();
            for p in uv {
                assert!((p[0] - 15.5).abs() < 1e-9 && (p[1] - 15.5).abs() < 1e-9);
            }
            assert!((z[0] - d).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_distance_halves_offset() {
        let intr = intr();
        let near = CameraPose::new(0.4, 0.1, 2.0, intr);
        let far = CameraPose::new(0.4, 0.1, 4.0, intr);
        // a point in the plane through the origin facing the camera
        let r = near.rotation();
        let p = r.transpose() * Vec3::new(0.3, -0.2, 0.0);
        let mut m = ObjectModel::empty();
        m.keypoints = vec![p];
        let (a, _) = project_keypoints(&m, &near).unwrap();
        let (b, _) = project_keypoints(&m, &far).unwrap();
        assert!(((a[0][0] - intr.cx) - 2.0 * (b[0][0] - intr.cx)).abs() < 1e-9);
        assert!(((a[0][1] - intr.cy) - 2.0 * (b[0][1] - intr.cy)).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let pose = CameraPose::new(0.0, 0.0, 2.0, intr());
        let mut m = ObjectModel::empty();
        m.keypoints = vec![Vec3::zeros(), pose.position() * 2.0];
        assert!(matches!(
            project_keypoints(&m, &pose),
            Err(Error::BehindCamera { index: 1, .. })
        ));
    }

    #[test]
    fn trajectories() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = TrajectoryConfig {
            d_azimuth: Range::constant(0.0),
            d_elevation: Range::constant(0.0),
            d_distance: Range::constant(0.0),
            ..Default::default()
        };
        let poses = sample_trajectory(&mut rng, &cfg, 4, intr()).unwrap();
        assert!(poses.iter().all(|p| *p == poses[0]));

        let cfg = TrajectoryConfig {
            d_azimuth: Range::constant(0.1),
            ..cfg
        };
        let poses = sample_trajectory(&mut rng, &cfg, 4, intr()).unwrap();
        for (t, p) in poses.iter().enumerate() {
            assert!((p.azimuth - (poses[0].azimuth + 0.1 * t as f64)).abs() < 1e-12);
            assert_eq!(p.elevation, poses[0].elevation);
        }

        assert!(Range::new(1.0, 0.0).is_err());
        let bad = TrajectoryConfig {
            elevation: Range::new(1.4, 1.5).unwrap(),
            d_elevation: Range::constant(0.05),
            ..Default::default()
        };
        assert!(sample_trajectory(&mut rng, &bad, 4, intr()).is_err());
    }
}
