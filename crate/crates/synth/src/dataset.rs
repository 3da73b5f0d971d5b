//! Sequence generation and the on-disk dataset format.
//!
//! A dataset directory holds `manifest.txt` and one `seq_NNNNN.kpsq` record
//! per sequence. Record layout, all integers u32 and floats f32, little
//! endian: magic `KPSQ`, version, T, K, H, W, C, then per frame the image
//! `[C*H*W]`, keypoints `(u, v) * K`, visibility `u8 * K` and the pose
//! `(azimuth, elevation, distance, focal)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rhg_core::loss::KeypointSet;
use rhg_core::Tensor;

use crate::background::background;
use crate::camera::{project_keypoints, sample_trajectory, CameraPose, Intrinsics, Range, TrajectoryConfig};
use crate::config::KeyValues;
use crate::error::io_err;
use crate::geometry::{CarDims, ObjectModel, Vec3};
use crate::raster::{keypoint_visibility, rasterize_frame, Light};
use crate::{Error, Result};

pub const RECORD_MAGIC: &[u8; 4] = b"KPSQ";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

// stream ids partition one master seed into independent generators
const MODEL_STREAM: u64 = 1 << 32;
const BACKGROUND_STREAM: u64 = 2 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub models: usize,
    pub seqs_per_model: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub keypoints: usize,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
    pub trajectory: TrajectoryConfig,
    pub light_intensity: Range,
    pub ambient: f64,
    /// Probability that a sequence gets an occluding box.
    pub occluder_prob: f64,
    pub backgrounds: usize,
    /// Depth-test tolerance as a fraction of the object scale.
    pub visibility_tol: f64,
    /// Resolution multiplier of the depth buffer used for visibility.
    pub visibility_supersample: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            models: 4,
            seqs_per_model: 100,
            frames: 4,
            height: 32,
            width: 32,
            channels: 1,
            keypoints: 8,
            fov_deg: 45.0,
            trajectory: TrajectoryConfig::default(),
            light_intensity: Range { lo: 0.7, hi: 1.0 },
            ambient: 0.35,
            occluder_prob: 0.5,
            backgrounds: 16,
            visibility_tol: 1e-3,
            visibility_supersample: 8,
        }
    }
}

/// Light direction in the camera frame: from upper left, towards the camera.
fn light_direction() -> Vec3 {
    Vec3::new(-0.4, -0.6, -0.7).normalize()
}

impl DatasetConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let t = d.trajectory.clone();
        let cfg = Self {
            models: kv.get_or("models", d.models)?,
            seqs_per_model: kv.get_or("seqs_per_model", d.seqs_per_model)?,
            frames: kv.get_or("frames", d.frames)?,
            height: kv.get_or("height", d.height)?,
            width: kv.get_or("width", d.width)?,
            channels: kv.get_or("channels", d.channels)?,
            keypoints: kv.get_or("keypoints", d.keypoints)?,
            fov_deg: kv.get_or("fov_deg", d.fov_deg)?,
            trajectory: TrajectoryConfig {
                azimuth: kv.range_or("azimuth", t.azimuth)?,
                elevation: kv.range_or("elevation", t.elevation)?,
                distance: kv.range_or("distance", t.distance)?,
                d_azimuth: kv.range_or("d_azimuth", t.d_azimuth)?,
                d_elevation: kv.range_or("d_elevation", t.d_elevation)?,
                d_distance: kv.range_or("d_distance", t.d_distance)?,
            },
            light_intensity: kv.range_or("light_intensity", d.light_intensity)?,
            ambient: kv.get_or("ambient", d.ambient)?,
            occluder_prob: kv.get_or("occluder_prob", d.occluder_prob)?,
            backgrounds: kv.get_or("backgrounds", d.backgrounds)?,
            visibility_tol: kv.get_or("visibility_tol", d.visibility_tol)?,
            visibility_supersample: kv.get_or("visibility_supersample", d.visibility_supersample)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let cfg = Self::from_kv(&kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn sequence_count(&self) -> usize {
        self.models * self.seqs_per_model
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.fov_deg.to_radians(), self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("models", self.models),
            ("seqs_per_model", self.seqs_per_model),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("backgrounds", self.backgrounds),
            ("visibility_supersample", self.visibility_supersample),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.keypoints != 8 && self.keypoints != 16 {
            return Err(Error::Config(format!("keypoints must be 8 or 16, got {}", self.keypoints)));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 170.0) {
            return Err(Error::Config(format!("fov_deg out of range: {}", self.fov_deg)));
        }
        if !(0.0..=1.0).contains(&self.ambient) || !(0.0..=1.0).contains(&self.occluder_prob) {
            return Err(Error::Config("ambient and occluder_prob must lie in [0, 1]".into()));
        }
        if !(self.visibility_tol > 0.0) {
            return Err(Error::Config("visibility_tol must be positive".into()));
        }
        if self.light_intensity.lo < 0.0 {
            return Err(Error::Config("light_intensity must be non-negative".into()));
        }
        self.trajectory.validate(self.frames)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseRecord {
    pub azimuth: f32,
    pub elevation: f32,
    pub distance: f32,
    pub focal: f32,
}

impl From<&CameraPose> for PoseRecord {
    fn from(p: &CameraPose) -> Self {
        Self {
            azimuth: p.azimuth as f32,
            elevation: p.elevation as f32,
            distance: p.distance as f32,
            focal: p.intrinsics.focal as f32,
        }
    }
}

/// One stored sequence. Keypoint coordinates carry f32 precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Tensor<f32>>,
    pub labels: Vec<KeypointSet>,
    pub poses: Vec<PoseRecord>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A generated sequence with the provenance that the record format omits.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSequence {
    pub sequence: Sequence,
    pub model: usize,
    pub background: usize,
    pub occluded: bool,
    /// Full-precision camera poses.
    pub cameras: Vec<CameraPose>,
    /// Rendered geometry; its keypoints are the labelled ones.
    pub scene: ObjectModel,
}

fn model_for(seed: u64, model: usize, keypoints: usize) -> ObjectModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MODEL_STREAM + model as u64);
    let dims = CarDims::sample(&mut rng);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.6..1.0));
    // rear, front, left, right, bottom, top: strongly distinct so that
    // corner identity is recoverable from a single grey-level view
    let shades = [0.45, 1.0, 0.3, 0.8, 0.2, 0.65];
    let palette = shades.map(|s| base.map(|c| c * s));
    ObjectModel::car(&dims, keypoints, &palette)
}

fn occluder_for<R: Rng>(rng: &mut R, car: &ObjectModel, camera: &CameraPose) -> ObjectModel {
    // a box part way along the sight line to one keypoint
    let target = car.keypoints[rng.gen_range(0..car.keypoints.len())];
    let frac = rng.gen_range(0.3..0.5);
    let jitter = Vec3::from_fn(|_, _| rng.gen_range(-0.08..0.08));
    let center = target + frac * (camera.position() - target) + jitter;
    let size = Vec3::from_fn(|_, _| rng.gen_range(0.15..0.3));
    let grey = rng.gen_range(0.2..0.9);
    let faces = [1.0, 0.9, 0.8, 0.85, 0.7, 0.95].map(|s| [grey * s; 3]);
    ObjectModel::cuboid(center, size, faces)
}

/// Sequence `index` of the dataset defined by `(cfg, seed)`. Each sequence
/// draws from its own ChaCha stream, so the result does not depend on
/// generation order.
pub fn generate_sequence(cfg: &DatasetConfig, seed: u64, index: usize) -> Result<GeneratedSequence> {
    let model_id = index / cfg.seqs_per_model;
    let car = model_for(seed, model_id, cfg.keypoints);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let bg_id = rng.gen_range(0..cfg.backgrounds);
    let light = Light {
        direction: light_direction(),
        intensity: cfg.light_intensity.sample(&mut rng),
        ambient: cfg.ambient,
    };
    let occluded = rng.gen_bool(cfg.occluder_prob);
    let intr = cfg.intrinsics();

    const ATTEMPTS: usize = 100;
    let mut attempt = 0;
    let (cameras, scene) = loop {
        attempt += 1;
        let cameras = sample_trajectory(&mut rng, &cfg.trajectory, cfg.frames, intr)?;
        let scene = if occluded {
            car.with_occluder(&occluder_for(&mut rng, &car, &cameras[0]))
        } else {
            car.clone()
        };
        // every vertex, occluder included, must stay in front of the camera
        let mut probe = scene.clone();
        probe.keypoints = scene.vertices.clone();
        if cameras.iter().all(|c| project_keypoints(&probe, c).is_ok()) {
            break (cameras, scene);
        }
        if attempt == ATTEMPTS {
            return Err(Error::Config(format!(
                "no valid trajectory for sequence {index} after {ATTEMPTS} attempts"
            )));
        }
    };

    let bg = background(seed ^ BACKGROUND_STREAM, bg_id, cfg.channels, cfg.height, cfg.width);
    let tol = cfg.visibility_tol * car.scale();
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut labels = Vec::with_capacity(cfg.frames);
    for cam in &cameras {
        let image = rasterize_frame(&scene, cam, &bg, &light)?;
        let (uv, _) = project_keypoints(&car, cam)?;
        let vis = keypoint_visibility(&scene, cam, cfg.height, cfg.width, tol, cfg.visibility_supersample)?;
        let uv32 = uv.iter().map(|p| p.map(|c| c as f32 as f64)).collect();
        frames.push(image.cast());
        labels.push(KeypointSet::new(uv32, vis)?);
    }
    Ok(GeneratedSequence {
        sequence: Sequence {
            frames,
            labels,
            poses: cameras.iter().map(PoseRecord::from).collect(),
        },
        model: model_id,
        background: bg_id,
        occluded,
        cameras,
        scene,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub version: u32,
    pub keypoints: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub count: usize,
    pub seed: u64,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "version={}\nK={}\nT={}\nH={}\nW={}\nC_img={}\ncount={}\nseed={}\n",
            self.version, self.keypoints, self.frames, self.height, self.width, self.channels, self.count, self.seed
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let need = |k: &str| -> Result<usize> {
            kv.get(k)?
                .ok_or_else(|| Error::Format(format!("manifest lacks {k}")))
        };
        let m = Self {
            version: need("version")? as u32,
            keypoints: need("K")?,
            frames: need("T")?,
            height: need("H")?,
            width: need("W")?,
            channels: need("C_img")?,
            count: need("count")?,
            seed: kv
                .get("seed")?
                .ok_or_else(|| Error::Format("manifest lacks seed".into()))?,
        };
        kv.finish().map_err(|e| Error::Format(e.to_string()))?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", m.version)));
        }
        Ok(m)
    }
}

pub fn record_name(index: usize) -> String {
    format!("seq_{index:05}.kpsq")
}

pub fn encode_record(seq: &Sequence) -> Result<Vec<u8>> {
    let first = seq
        .frames
        .first()
        .ok_or_else(|| Error::Format("sequence has no frames".into()))?;
    let (c, h, w) = first.chw("encode_record")?;
    let k = seq.labels[0].len();
    if seq.labels.len() != seq.len() || seq.poses.len() != seq.len() {
        return Err(Error::Format("frames, labels and poses differ in length".into()));
    }
    let mut out = Vec::with_capacity(28 + seq.len() * (4 * (c * h * w + 2 * k + 4) + k));
    out.extend_from_slice(RECORD_MAGIC);
    for v in [FORMAT_VERSION, seq.len() as u32, k as u32, h as u32, w as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for ((img, kps), pose) in seq.frames.iter().zip(&seq.labels).zip(&seq.poses) {
        if img.shape() != [c, h, w] || kps.len() != k {
            return Err(Error::Format("frame shape or keypoint count changes within a sequence".into()));
        }
        for v in img.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &kps.points {
            out.extend_from_slice(&(p[0] as f32).to_le_bytes());
            out.extend_from_slice(&(p[1] as f32).to_le_bytes());
        }
        out.extend(kps.visible.iter().map(|&v| v as u8));
        for v in [pose.azimuth, pose.elevation, pose.distance, pose.focal] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("record truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Record header: `(T, K, H, W, C)`.
pub type RecordShape = (usize, usize, usize, usize, usize);

pub fn decode_record(bytes: &[u8]) -> Result<(RecordShape, Sequence)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != RECORD_MAGIC {
        return Err(Error::Format("bad record magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported record version {version}")));
    }
    let [t, k, h, w, c] = [(); 5].map(|_| r.u32().map(|v| v as usize));
    let (t, k, h, w, c) = (t?, k?, h?, w?, c?);
    let mut seq = Sequence {
        frames: Vec::with_capacity(t),
        labels: Vec::with_capacity(t),
        poses: Vec::with_capacity(t),
    };
    for _ in 0..t {
        let data = (0..c * h * w).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        seq.frames.push(Tensor::new(&[c, h, w], data)?);
        let points = (0..k)
            .map(|_| Ok([r.f32()? as f64, r.f32()? as f64]))
            .collect::<Result<Vec<_>>>()?;
        let visible = r.take(k)?.iter().map(|&b| b != 0).collect();
        seq.labels.push(KeypointSet::new(points, visible)?);
        seq.poses.push(PoseRecord {
            azimuth: r.f32()?,
            elevation: r.f32()?,
            distance: r.f32()?,
            focal: r.f32()?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after record".into()));
    }
    Ok(((t, k, h, w, c), seq))
}

/// Writes every sequence and then the manifest into `out`. The config is
/// validated before anything touches the filesystem.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let count = cfg.sequence_count();
    for i in 0..count {
        let g = generate_sequence(cfg, seed, i)?;
        let path = out.join(record_name(i));
        fs::write(&path, encode_record(&g.sequence)?).map_err(io_err(&path))?;
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        keypoints: cfg.keypoints,
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        channels: cfg.channels,
        count,
        seed,
    };
    let path = out.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(manifest.to_text().as_bytes()).map_err(io_err(&path))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest = Manifest::parse(&text)?;
        let want = (manifest.frames, manifest.keypoints, manifest.height, manifest.width, manifest.channels);
        let sequences = (0..manifest.count)
            .map(|i| {
                let path: PathBuf = dir.join(record_name(i));
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                let (shape, seq) = decode_record(&bytes)
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
                if shape != want {
                    return Err(Error::Format(format!(
                        "{}: shape {shape:?} disagrees with manifest {want:?}",
                        path.display()
                    )));
                }
                Ok(seq)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, sequences })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetConfig {
        DatasetConfig {
            models: 2,
            seqs_per_model: 3,
            height: 16,
            width: 16,
            ..Default::default()
        }
    }

    #[test]
    fn record_round_trip() {
        let g = generate_sequence(&tiny(), 5, 4).unwrap();
        let bytes = encode_record(&g.sequence).unwrap();
        assert_eq!(&bytes[..4], b"KPSQ");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        let per_frame = 4 * (16 * 16 + 2 * 8 + 4) + 8;
        assert_eq!(bytes.len(), 28 + 4 * per_frame);
        let (shape, back) = decode_record(&bytes).unwrap();
        assert_eq!(shape, (4, 8, 16, 16, 1));
        assert_eq!(back, g.sequence);
        assert!(decode_record(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn sequence_invariants() {
        let cfg = tiny();
        for i in 0..cfg.sequence_count() {
            let g = generate_sequence(&cfg, 11, i).unwrap();
            assert_eq!(g.model, i / 3);
            assert_eq!(g.sequence.len(), 4);
            let step = g.cameras[1].azimuth - g.cameras[0].azimuth;
            for w in g.cameras.windows(2) {
                assert!((w[1].azimuth - w[0].azimuth - step).abs() < 1e-12);
            }
            assert!(g.sequence.frames.iter().all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
        }
        assert_eq!(generate_sequence(&cfg, 11, 2).unwrap(), generate_sequence(&cfg, 11, 2).unwrap());
        assert_ne!(generate_sequence(&cfg, 11, 2).unwrap(), generate_sequence(&cfg, 12, 2).unwrap());
    }

    #[test]
    fn full_scale_count() {
        let cfg = DatasetConfig {
            models: 472,
            seqs_per_model: 100,
            ..Default::default()
        };
        assert_eq!(cfg.sequence_count(), 47_200);
        assert_eq!(cfg.sequence_count() * cfg.frames, 188_800);
    }

    #[test]
    fn config_text() {
        let cfg = DatasetConfig::parse("models = 2\nseqs_per_model = 3\nazimuth = 0.5, 1.0\n").unwrap();
        assert_eq!(cfg.sequence_count(), 6);
        assert_eq!(cfg.trajectory.azimuth, Range { lo: 0.5, hi: 1.0 });
        assert!(DatasetConfig::parse("keypoints = 9\n").is_err());
        assert!(DatasetConfig::parse("colour = red\n").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            version: 1,
            keypoints: 8,
            frames: 4,
            height: 32,
            width: 32,
            channels: 1,
            count: 6,
            seed: 42,
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("version=1\n").is_err());
    }
}
