use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rhg_synth::camera::{project_keypoints, CameraPose, Intrinsics};
use rhg_synth::dataset::{generate_sequence, DatasetConfig};
use rhg_synth::geometry::ObjectModel;
use rhg_synth::raster::{keypoint_visibility, render_depth, visibility};

type V = Vector3<f64>;

/// Ray/triangle hit parameter t along `dir` from `orig` (Moller-Trumbore).
fn hit(orig: V, dir: V, tri: [V; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let s = orig - tri[0];
    let u = s.dot(&p) / det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) / det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) / det)
}

/// Visible when inside the image and no triangle crosses the open segment
/// from the camera centre to the keypoint.
fn ray_cast_visible(scene: &ObjectModel, pose: &CameraPose, h: usize, w: usize) -> Vec<bool> {
    let eye = pose.position();
    let (uv, _) = project_keypoints(scene, pose).unwrap();
    scene
        .keypoints
        .iter()
        .zip(uv)
        .map(|(k, p)| {
            let (x, y) = (p[0].round(), p[1].round());
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                return false;
            }
            let dir = k - eye;
            !(0..scene.faces.len())
                .any(|f| matches!(hit(eye, dir, scene.triangle(f)), Some(t) if t > 1e-9 && t < 1.0 - 1e-6))
        })
        .collect()
}

/// A cuboid with up to two smaller boxes placed on sight lines to its
/// corners, seen from a random orbit pose at 32x32.
fn random_scene(r: &mut ChaCha8Rng) -> (ObjectModel, CameraPose) {
    let grey = [[0.5; 3]; 6];
    let size = V::new(r.gen_range(0.6..1.2), r.gen_range(0.3..0.8), r.gen_range(0.3..0.8));
    let mut scene = ObjectModel::cuboid(V::zeros(), size, grey);
    let pose = CameraPose::new(
        r.gen_range(0.0..std::f64::consts::TAU),
        r.gen_range(-0.3..0.6),
        r.gen_range(2.2..3.2),
        Intrinsics::from_fov(45f64.to_radians(), 32, 32),
    );
    for _ in 0..r.gen_range(0..3) {
        let target = scene.keypoints[r.gen_range(0..8)];
        let c = target + r.gen_range(0.2..0.6) * (pose.position() - target) + V::from_fn(|_, _| r.gen_range(-0.15..0.15));
        let occ = ObjectModel::cuboid(c, V::from_fn(|_, _| r.gen_range(0.1..0.35)), grey);
        scene = scene.with_occluder(&occ);
    }
    (scene, pose)
}

fn object_scale(scene: &ObjectModel) -> f64 {
    let mut main = scene.clone();
    main.vertices.truncate(8);
    main.scale()
}

#[test]
fn depth_visibility_agrees_with_ray_casting_on_cuboid_scenes() {
    let cfg = DatasetConfig::default();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (mut agree, mut total, mut occluded) = (0, 0, 0);
    for _ in 0..100 {
        let (scene, pose) = random_scene(&mut r);
        let tol = cfg.visibility_tol * object_scale(&scene);
        let by_depth = keypoint_visibility(&scene, &pose, 32, 32, tol, cfg.visibility_supersample).unwrap();
        let by_ray = ray_cast_visible(&scene, &pose, 32, 32);
        agree += by_depth.iter().zip(&by_ray).filter(|(a, b)| a == b).count();
        occluded += by_ray.iter().filter(|v| !**v).count();
        total += by_ray.len();
    }
    let rate = agree as f64 / total as f64;
    assert!(rate >= 0.99, "{agree}/{total}");
    // the scenes exercise both outcomes
    assert!(occluded > total / 10 && occluded < total * 9 / 10);
}

#[test]
fn generated_labels_agree_with_ray_casting() {
    let cfg = DatasetConfig {
        models: 5,
        seqs_per_model: 6,
        occluder_prob: 1.0,
        ..Default::default()
    };
    let (mut agree, mut total) = (0, 0);
    for i in 0..cfg.sequence_count() {
        let g = generate_sequence(&cfg, 3, i).unwrap();
        for (cam, labels) in g.cameras.iter().zip(&g.sequence.labels) {
            let by_ray = ray_cast_visible(&g.scene, cam, cfg.height, cfg.width);
            agree += by_ray.iter().zip(&labels.visible).filter(|(a, b)| a == b).count();
            total += by_ray.len();
        }
    }
    assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
}

#[test]
fn pixel_centre_depth_test_examples() {
    let grey = [[0.5; 3]; 6];
    let cube = ObjectModel::cuboid(V::zeros(), V::repeat(1.0), grey);
    let pose = CameraPose::new(0.0, 0.0, 3.0, Intrinsics::from_fov(0.8, 32, 32));
    let depth = render_depth(&cube, &pose, 32, 32);
    // centre of the front face, and the same pixel pushed behind the cube
    let front = [[15.5, 15.5], [15.5, 15.5]];
    let vis = visibility(&front, &[2.5, 3.5], &depth, 1e-3);
    assert_eq!(vis, vec![true, false]);
    let vis = keypoint_visibility(&cube, &pose, 32, 32, 1e-3, 8).unwrap();
    // corners on the front face (x = +0.5) are visible, back ones are hidden
    for (k, v) in cube.keypoints.iter().zip(vis) {
        assert_eq!(v, k.x > 0.0, "{k:?}");
    }
}
