//! Z-buffer triangle rasterization, flat shading and depth-test visibility.

use rhg_core::Tensor;

use crate::camera::{project_keypoints, CameraPose, MIN_DEPTH};
use crate::geometry::{ObjectModel, Vec3};
use crate::{Error, Result};

/// Depth buffer plus the index of the face that won each pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    /// Camera-frame z of the nearest surface, `+inf` where nothing is drawn.
    pub depth: Vec<f64>,
    pub face: Vec<Option<usize>>,
    /// Coefficients `(a, b, c)` of the winning face's `1/z = a u + b v + c`.
    pub inv_depth_plane: Vec<[f64; 3]>,
}

impl Raster {
    /// Depth image `[1, H, W]`.
    pub fn depth_image(&self) -> Tensor<f64> {
        Tensor::new(&[1, self.height, self.width], self.depth.clone()).expect("depth buffer size")
    }

    /// Depth of the surface drawn at the pixel nearest to `(u, v)`, with its
    /// plane evaluated at `(u, v)` itself. `None` outside the image.
    pub fn surface_depth_at(&self, u: f64, v: f64) -> Option<f64> {
        let (x, y) = (u.round(), v.round());
        if !(x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64) {
            return None;
        }
        let idx = y as usize * self.width + x as usize;
        if self.face[idx].is_none() {
            return Some(f64::INFINITY);
        }
        let [a, b, c] = self.inv_depth_plane[idx];
        let inv = a * u + b * v + c;
        Some(if inv > 0.0 { 1.0 / inv } else { self.depth[idx] })
    }
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Rasterizes every face at integer pixel centres. Depth is interpolated
/// perspective-correctly (linear in 1/z). Faces with a vertex at or behind
/// the camera plane, and zero-area faces, are skipped.
pub fn rasterize(model: &ObjectModel, pose: &CameraPose, height: usize, width: usize) -> Raster {
    let mut depth = vec![f64::INFINITY; height * width];
    let mut face = vec![None; height * width];
    let mut inv_depth_plane = vec![[0.0; 3]; height * width];
    let rot = pose.rotation();
    let eye = pose.position();
    let cam: Vec<Vec3> = model.vertices.iter().map(|v| rot * (v - eye)).collect();
    for (fi, f) in model.faces.iter().enumerate() {
        let pc = f.map(|i| cam[i]);
        if pc.iter().any(|p| p.z <= MIN_DEPTH) {
            continue;
        }
        let uv = pc.map(|p| pose.project_camera(&p));
        let area = edge(uv[0], uv[1], uv[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        let lo = |k: usize| uv.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let hi = |k: usize, n: usize| {
            uv.iter()
                .map(|p| p[k])
                .fold(f64::NEG_INFINITY, f64::max)
                .floor()
                .min(n as f64 - 1.0)
        };
        let (x0, x1, y0, y1) = (lo(0), hi(0, width), lo(1), hi(1, height));
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let inv_z = pc.map(|p| 1.0 / p.z);
        // barycentric weight i is affine in (u, v); so is 1/z
        let mut plane = [0.0; 3];
        for i in 0..3 {
            let (a, b) = (uv[(i + 1) % 3], uv[(i + 2) % 3]);
            let coef = [-(b[1] - a[1]), b[0] - a[0], (b[1] - a[1]) * a[0] - (b[0] - a[0]) * a[1]];
            for (pl, cf) in plane.iter_mut().zip(coef) {
                *pl += inv_z[i] * cf / area;
            }
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let p = [x as f64, y as f64];
                let b = [
                    edge(uv[1], uv[2], p) / area,
                    edge(uv[2], uv[0], p) / area,
                    edge(uv[0], uv[1], p) / area,
                ];
                if b.iter().any(|&w| w < 0.0) {
                    continue;
                }
                let z = 1.0 / (b[0] * inv_z[0] + b[1] * inv_z[1] + b[2] * inv_z[2]);
                let idx = y * width + x;
                if z < depth[idx] {
                    depth[idx] = z;
                    face[idx] = Some(fi);
                    inv_depth_plane[idx] = plane;
                }
            }
        }
    }
    Raster {
        height,
        width,
        depth,
        face,
        inv_depth_plane,
    }
}

/// Camera-frame depth image `[1, H, W]`; background pixels are `+inf`.
pub fn render_depth(model: &ObjectModel, pose: &CameraPose, height: usize, width: usize) -> Tensor<f64> {
    rasterize(model, pose, height, width).depth_image()
}

/// Directional light fixed in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Light {
    /// Unit vector from the surface towards the light, camera frame.
    pub direction: Vec3,
    pub intensity: f64,
    /// Fraction of the intensity that reaches every face regardless of angle.
    pub ambient: f64,
}

impl Light {
    pub fn head_on(intensity: f64) -> Self {
        Self {
            direction: -Vec3::z(),
            intensity,
            ambient: 0.0,
        }
    }
}

/// Flat-shaded render over `background` (`[C, H, W]`, C = 1 or 3). A grey
/// image takes the mean of the RGB albedo.
pub fn rasterize_frame(
    model: &ObjectModel,
    pose: &CameraPose,
    background: &Tensor<f64>,
    light: &Light,
) -> Result<Tensor<f64>> {
    let (c, height, width) = background.chw("rasterize_frame")?;
    if c != 1 && c != 3 {
        return Err(Error::Config(format!("images need 1 or 3 channels, got {c}")));
    }
    let raster = rasterize(model, pose, height, width);
    let rot = pose.rotation();
    let eye = pose.position();
    let shade: Vec<f64> = (0..model.faces.len())
        .map(|fi| {
            let [a, b, cc] = model.triangle(fi).map(|v| rot * (v - eye));
            let mut n = (b - a).cross(&(cc - a)).normalize();
            if n.dot(&a) > 0.0 {
                n = -n;
            }
            let cos = n.dot(&light.direction).max(0.0);
            light.intensity * (light.ambient + (1.0 - light.ambient) * cos)
        })
        .collect();
    let mut out = background.clone();
    let plane = height * width;
    for (idx, f) in raster.face.iter().enumerate() {
        let Some(f) = *f else { continue };
        let albedo = model.albedo[f];
        for ch in 0..c {
            let a = if c == 1 {
                albedo.iter().sum::<f64>() / 3.0
            } else {
                albedo[ch]
            };
            out.data_mut()[ch * plane + idx] = (a * shade[f]).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// A keypoint is visible when it projects inside the image and is no deeper
/// than the depth buffer at its nearest pixel plus `tol`.
pub fn visibility(points: &[[f64; 2]], depths: &[f64], depth_image: &Tensor<f64>, tol: f64) -> Vec<bool> {
    let (_, height, width) = depth_image.chw("visibility").expect("depth image is [1, H, W]");
    points
        .iter()
        .zip(depths)
        .map(|(p, &z)| {
            let (x, y) = (p[0].round(), p[1].round());
            if !(x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
                return false;
            }
            z <= depth_image.data()[y as usize * width + x as usize] + tol
        })
        .collect()
}

/// Depth test against the drawn surface's plane rather than the pixel-centre
/// sample: a keypoint is visible when it projects inside the image and is no
/// deeper than [`Raster::surface_depth_at`] plus `tol`. Keypoints on mesh
/// vertices then compare against their own face even when the pixel centre
/// lies where that face is steeply inclined.
pub fn visibility_planar(points: &[[f64; 2]], depths: &[f64], raster: &Raster, tol: f64) -> Vec<bool> {
    points
        .iter()
        .zip(depths)
        .map(|(p, &z)| match raster.surface_depth_at(p[0], p[1]) {
            Some(d) => z <= d + tol,
            None => false,
        })
        .collect()
}

/// Visibility of every model keypoint using a depth buffer rendered
/// `supersample` times finer than the `height x width` frame and the planar
/// depth test of [`visibility_planar`].
pub fn keypoint_visibility(
    model: &ObjectModel,
    pose: &CameraPose,
    height: usize,
    width: usize,
    tol: f64,
    supersample: usize,
) -> Result<Vec<bool>> {
    if supersample == 0 {
        return Err(Error::Config("supersample must be positive".into()));
    }
    let mut fine = *pose;
    fine.intrinsics = pose.intrinsics.scaled(supersample);
    let (uv, z) = project_keypoints(model, &fine)?;
    let raster = rasterize(model, &fine, height * supersample, width * supersample);
    Ok(visibility_planar(&uv, &z, &raster, tol))
}
