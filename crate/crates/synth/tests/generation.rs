use nalgebra::{Matrix3x4, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rhg_core::Tensor;
use rhg_synth::background::background;
use rhg_synth::camera::{project_keypoints, sample_trajectory, CameraPose, Intrinsics, Range, TrajectoryConfig};
use rhg_synth::dataset::{generate_dataset, generate_sequence, Dataset, DatasetConfig, MANIFEST};
use rhg_synth::geometry::{CarDims, ObjectModel};
use rhg_synth::raster::{rasterize, rasterize_frame, Light};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Look-at view matrix built from the camera position alone, then a 3x4
/// intrinsic matrix; perspective divide at the end.
fn matrix_projection(p: &Vector3<f64>, pose: &CameraPose) -> [f64; 2] {
    let (az, el, d) = (pose.azimuth, pose.elevation, pose.distance);
    let eye = Vector3::new(d * el.cos() * az.cos(), d * el.cos() * az.sin(), d * el.sin());
    let f = (-eye).normalize();
    let s = f.cross(&Vector3::z()).normalize();
    let u = f.cross(&s);
    #[rustfmt::skip]
    let view = Matrix4::new(
        s.x, s.y, s.z, -s.dot(&eye),
        u.x, u.y, u.z, -u.dot(&eye),
        f.x, f.y, f.z, -f.dot(&eye),
        0.0, 0.0, 0.0, 1.0,
    );
    let k = pose.intrinsics;
    #[rustfmt::skip]
    let intr = Matrix3x4::new(
        k.focal, 0.0, k.cx, 0.0,
        0.0, k.focal, k.cy, 0.0,
        0.0, 0.0, 1.0, 0.0,
    );
    let h = intr * view * Vector4::new(p.x, p.y, p.z, 1.0);
    [h.x / h.z, h.y / h.z]
}

#[test]
fn projection_matches_homogeneous_matrix_pipeline() {
    let mut r = rng(1);
    for _ in 0..200 {
        let dims = CarDims::sample(&mut r);
        let model = ObjectModel::car(&dims, 16, &[[0.5; 3]; 6]);
        let pose = CameraPose::new(
            r.gen_range(0.0..std::f64::consts::TAU),
            r.gen_range(-1.0..1.0),
            r.gen_range(2.0..6.0),
            Intrinsics::centered(r.gen_range(20.0..80.0), 32, 48),
        );
        let (uv, _) = project_keypoints(&model, &pose).unwrap();
        for (k, p) in model.keypoints.iter().zip(uv) {
            let m = matrix_projection(k, &pose);
            assert!((m[0] - p[0]).abs() < 1e-9 && (m[1] - p[1]).abs() < 1e-9);
        }
    }
}

#[test]
fn initial_azimuth_is_uniform() {
    let mut r = rng(2);
    let cfg = TrajectoryConfig::default();
    let n = 1000;
    let az: Vec<f64> = (0..n)
        .map(|_| sample_trajectory(&mut r, &cfg, 1, Intrinsics::centered(40.0, 32, 32)).unwrap()[0].azimuth)
        .collect();
    let mean = az.iter().sum::<f64>() / n as f64;
    // uniform on [0, 2 pi): sd = 2 pi / sqrt(12)
    let se = std::f64::consts::TAU / 12f64.sqrt() / (n as f64).sqrt();
    assert!((mean - std::f64::consts::PI).abs() < 3.0 * se, "{mean}");
    assert!(az.iter().all(|a| (0.0..std::f64::consts::TAU).contains(a)));
}

#[test]
fn keypoint_motion_is_smooth() {
    let cfg = DatasetConfig {
        frames: 8,
        ..Default::default()
    };
    let mut checked = 0;
    for i in 0..40 {
        let g = generate_sequence(&cfg, 4, i).unwrap();
        let labels = &g.sequence.labels;
        let steps: Vec<f64> = labels
            .windows(2)
            .map(|w| {
                let d: f64 = w[0].points.iter().zip(&w[1].points).map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1])).sum();
                d / w[0].len() as f64
            })
            .collect();
        let mut sorted = steps.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        if median < 0.1 {
            continue; // nearly static camera
        }
        checked += 1;
        assert!(steps.iter().all(|s| *s <= 3.0 * median), "sequence {i}: {steps:?}");
    }
    assert!(checked > 10);
}

#[test]
fn static_camera_keeps_labels_fixed() {
    let cfg = DatasetConfig {
        trajectory: TrajectoryConfig {
            d_azimuth: Range::constant(0.0),
            d_elevation: Range::constant(0.0),
            d_distance: Range::constant(0.0),
            ..Default::default()
        },
        ..Default::default()
    };
    let g = generate_sequence(&cfg, 5, 0).unwrap();
    let s = &g.sequence;
    assert!(s.labels.iter().all(|l| *l == s.labels[0]));
    assert!(s.frames.iter().all(|f| *f == s.frames[0]));
}

#[test]
fn background_survives_outside_the_silhouette() {
    let cfg = DatasetConfig::default();
    let bg = background(3, 1, 1, 32, 32);
    for i in 0..10 {
        let g = generate_sequence(&cfg, 6, i).unwrap();
        let cam = g.cameras[0];
        let light = Light::head_on(0.9);
        let img = rasterize_frame(&g.scene, &cam, &bg, &light).unwrap();
        let cover = rasterize(&g.scene, &cam, 32, 32);
        let mut inside = 0;
        for (idx, f) in cover.face.iter().enumerate() {
            match f {
                None => assert_eq!(img.data()[idx], bg.data()[idx]),
                Some(_) => inside += 1,
            }
        }
        assert!(inside > 20);
    }
}

#[test]
fn rendering_is_deterministic() {
    let cfg = DatasetConfig::default();
    let g = generate_sequence(&cfg, 7, 3).unwrap();
    let bg: Tensor<f64> = background(7, 0, 3, 32, 32);
    let light = Light::head_on(1.0);
    let a = rasterize_frame(&g.scene, &g.cameras[1], &bg, &light).unwrap();
    let b = rasterize_frame(&g.scene, &g.cameras[1], &bg, &light).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dataset_on_disk() {
    let cfg = DatasetConfig {
        models: 2,
        seqs_per_model: 3,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let m = generate_dataset(&cfg, 9, &a).unwrap();
    generate_dataset(&cfg, 9, &b).unwrap();
    assert_eq!(m.count, 6);
    let ds = Dataset::load(&a).unwrap();
    assert_eq!(ds.sequences.len(), 6);
    assert_eq!(ds.sequences.iter().map(|s| s.len()).sum::<usize>(), 24);
    for i in 0..6 {
        assert_eq!(ds.sequences[i], generate_sequence(&cfg, 9, i).unwrap().sequence);
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap());
    }
    let text = std::fs::read_to_string(a.join(MANIFEST)).unwrap();
    assert_eq!(text, "version=1\nK=8\nT=4\nH=32\nW=32\nC_img=1\ncount=6\nseed=9\n");
}

#[test]
fn bad_config_or_destination_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = DatasetConfig {
        keypoints: 5,
        ..Default::default()
    };
    let target = dir.path().join("never");
    assert!(generate_dataset(&bad, 1, &target).is_err());
    assert!(!target.exists());

    let file = dir.path().join("file");
    std::fs::write(&file, b"x").unwrap();
    let cfg = DatasetConfig {
        models: 1,
        seqs_per_model: 1,
        ..Default::default()
    };
    assert!(generate_dataset(&cfg, 1, &file.join("sub")).is_err());
}

#[test]
fn occluders_hide_keypoints() {
    let count = |p: f64| {
        let cfg = DatasetConfig {
            models: 2,
            seqs_per_model: 25,
            occluder_prob: p,
            ..Default::default()
        };
        let (mut hidden, mut total) = (0, 0);
        for i in 0..cfg.sequence_count() {
            for l in generate_sequence(&cfg, 10, i).unwrap().sequence.labels {
                hidden += l.len() - l.visible_count();
                total += l.len();
            }
        }
        hidden as f64 / total as f64
    };
    let (none, all) = (count(0.0), count(1.0));
    assert!(all > none + 0.05, "{none} {all}");
}
