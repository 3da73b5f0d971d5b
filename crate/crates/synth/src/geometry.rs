//! Procedural triangle meshes with annotated 3D keypoints.

use nalgebra::Vector3;

pub type Vec3 = Vector3<f64>;

/// Eight corners of an axis-aligned box, bit `i` of the index selecting the
/// max side of axis `i`.
fn box_corners(min: Vec3, max: Vec3) -> [Vec3; 8] {
    std::array::from_fn(|i| {
        Vec3::new(
            if i & 1 == 0 { min.x } else { max.x },
            if i & 2 == 0 { min.y } else { max.y },
            if i & 4 == 0 { min.z } else { max.z },
        )
    })
}

// two triangles per face, corners indexed as in `box_corners`
const BOX_FACES: [[usize; 4]; 6] = [
    [0, 2, 6, 4], // x min
    [1, 5, 7, 3], // x max
    [0, 4, 5, 1], // y min
    [2, 3, 7, 6], // y max
    [0, 1, 3, 2], // z min
    [4, 6, 7, 5], // z max
];

const BOX_EDGES: [[usize; 2]; 12] = [
    [0, 1], [2, 3], [4, 5], [6, 7],
    [0, 2], [1, 3], [4, 6], [5, 7],
    [0, 4], [1, 5], [2, 6], [3, 7],
];

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// Per-face RGB reflectance in [0, 1].
    pub albedo: Vec<[f64; 3]>,
    pub edges: Vec<[usize; 2]>,
    pub keypoints: Vec<Vec3>,
}

impl ObjectModel {
    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            faces: Vec::new(),
            albedo: Vec::new(),
            edges: Vec::new(),
            keypoints: Vec::new(),
        }
    }

    /// Axis-aligned box centred at `center` with full side lengths `size`;
    /// its corners are the keypoints. `face_albedo` follows the order
    /// x-, x+, y-, y+, z-, z+.
    pub fn cuboid(center: Vec3, size: Vec3, face_albedo: [[f64; 3]; 6]) -> Self {
        let corners = box_corners(center - size / 2.0, center + size / 2.0);
        let mut faces = Vec::with_capacity(12);
        let mut albedo = Vec::with_capacity(12);
        for (q, a) in BOX_FACES.iter().zip(face_albedo) {
            faces.push([q[0], q[1], q[2]]);
            faces.push([q[0], q[2], q[3]]);
            albedo.extend([a, a]);
        }
        Self {
            vertices: corners.to_vec(),
            faces,
            albedo,
            edges: BOX_EDGES.to_vec(),
            keypoints: corners.to_vec(),
        }
    }

    /// Vehicle-like hull: a body box with a shorter cabin on top, centred on
    /// the origin. With `keypoints = 8` only the body corners are annotated,
    /// with 16 the cabin corners follow.
    pub fn car(dims: &CarDims, keypoints: usize, palette: &[[f64; 3]; 6]) -> Self {
        let total = dims.body_height + dims.cabin_height;
        let body_center = Vec3::new(0.0, 0.0, -total / 2.0 + dims.body_height / 2.0);
        let body = Self::cuboid(
            body_center,
            Vec3::new(dims.length, dims.width, dims.body_height),
            *palette,
        );
        let cabin_center = Vec3::new(
            dims.cabin_offset,
            0.0,
            -total / 2.0 + dims.body_height + dims.cabin_height / 2.0,
        );
        let shade = |c: [f64; 3]| c.map(|v| v * 0.8);
        let cabin = Self::cuboid(
            cabin_center,
            Vec3::new(dims.cabin_length, dims.cabin_width, dims.cabin_height),
            palette.map(shade),
        );
        let mut car = body.merged(&cabin);
        if keypoints == 8 {
            car.keypoints.truncate(8);
        }
        car
    }

    /// Appends the geometry and keypoints of `other`.
    pub fn merged(&self, other: &Self) -> Self {
        let mut out = self.with_occluder(other);
        out.keypoints.extend(other.keypoints.iter().copied());
        out
    }

    /// Adds the triangles of `occluder` but none of its keypoints.
    pub fn with_occluder(&self, occluder: &Self) -> Self {
        let base = self.vertices.len();
        let mut out = self.clone();
        out.vertices.extend(occluder.vertices.iter().copied());
        out.faces
            .extend(occluder.faces.iter().map(|f| f.map(|i| i + base)));
        out.albedo.extend(occluder.albedo.iter().copied());
        out.edges
            .extend(occluder.edges.iter().map(|e| e.map(|i| i + base)));
        out
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].map(|i| self.vertices[i])
    }

    /// Largest extent of the vertex bounding box.
    pub fn scale(&self) -> f64 {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        if self.vertices.is_empty() {
            0.0
        } else {
            (hi - lo).max()
        }
    }
}

/// Body and cabin proportions, in object units (body length about 1).
#[derive(Clone, Debug, PartialEq)]
pub struct CarDims {
    pub length: f64,
    pub width: f64,
    pub body_height: f64,
    pub cabin_length: f64,
    pub cabin_width: f64,
    pub cabin_height: f64,
    pub cabin_offset: f64,
}

impl CarDims {
    pub fn sample<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        let length = rng.gen_range(0.9..1.1);
        let width = rng.gen_range(0.4..0.55);
        let cabin_length = length * rng.gen_range(0.45..0.65);
        let slack = (length - cabin_length) / 2.0;
        Self {
            length,
            width,
            body_height: rng.gen_range(0.2..0.3),
            cabin_length,
            cabin_width: width * rng.gen_range(0.8..0.95),
            cabin_height: rng.gen_range(0.15..0.25),
            // cabin set back toward -x, so front and rear differ in profile
            cabin_offset: rng.gen_range(-0.8..-0.3) * slack,
        }
    }
}
