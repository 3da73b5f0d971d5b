use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rhg_core::loss::{render_heatmaps, sigmoid_ce_mean, sigmoid_ce_naive, sigmoid_ce_stable, KeypointSet};
use rhg_core::metrics::{decode_keypoints, pck, PckConfig, PckError};
use rhg_core::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_target(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    // mix of hard labels and soft values
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| match r.gen_range(0..3) {
            0 => 0.0,
            1 => 1.0,
            _ => r.gen_range(0.0..=1.0),
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn stable_loss_matches_literal_formula() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let x = Tensor::<f64>::uniform(&[2, 4, 4], -20.0, 20.0, &mut r);
        let z = random_target(&[2, 4, 4], &mut r);
        let mut naive_sum = 0.0;
        for (&xi, &zi) in x.data().iter().zip(z.data()) {
            let naive = sigmoid_ce_naive(xi, zi);
            assert!((sigmoid_ce_stable(xi, zi) - naive).abs() < 1e-9, "x={xi} z={zi}");
            naive_sum += naive;
        }
        let mean = sigmoid_ce_mean(&x, &z).unwrap();
        assert!((mean - naive_sum / x.len() as f64).abs() < 1e-9);
    }
}

#[test]
fn loss_gradient_is_sigmoid_minus_target() {
    for seed in 0..50 {
        let mut r = rng(100 + seed);
        let x = Tensor::<f64>::uniform(&[3, 5, 4], -20.0, 20.0, &mut r);
        let z = random_target(&[3, 5, 4], &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        // unit weight per element: undo the mean
        let l = tape.sigmoid_ce(xv, &z).unwrap();
        let l = tape.scale(l, x.len() as f64);
        let g = tape.backward(l).unwrap();
        for ((&gi, &xi), &zi) in g.get(xv).unwrap().data().iter().zip(x.data()).zip(z.data()) {
            let want = 1.0 / (1.0 + (-xi).exp()) - zi;
            assert!((gi - want).abs() < 1e-9);
        }
    }
}

#[test]
fn saturated_logits_stay_finite() {
    assert!(sigmoid_ce_stable(30.0, 1.0) < 1e-12);
    let v: f64 = sigmoid_ce_stable(-30.0, 0.0);
    assert!(v.is_finite() && v < 1e-12);
    assert!((sigmoid_ce_stable(0.0, 0.3) - 2f64.ln()).abs() < 1e-15);
    assert!(sigmoid_ce_stable(-800.0, 0.0f64).is_finite());
}

#[test]
fn decode_inverts_render_for_separated_keypoints() {
    let mut r = rng(7);
    let mut checked = 0;
    while checked < 200 {
        let k = r.gen_range(1..=5);
        let pts: Vec<[f64; 2]> = (0..k).map(|_| [r.gen_range(0.0..31.0), r.gen_range(0.0..23.0)]).collect();
        let separated = pts.iter().enumerate().all(|(i, a)| {
            pts[..i].iter().all(|b| (a[0] - b[0]).hypot(a[1] - b[1]) > 4.0)
        });
        if !separated {
            continue;
        }
        let kps = KeypointSet::all_visible(pts.clone());
        let maps: Tensor<f64> = render_heatmaps(&kps, 24, 32, 1.0).unwrap();
        let dec = decode_keypoints(&maps).unwrap();
        for (d, p) in dec.iter().zip(&pts) {
            assert_eq!(*d, [p[0].round(), p[1].round()]);
        }
        for ch in 0..k {
            let m = maps.data()[ch * 24 * 32..(ch + 1) * 24 * 32].iter().cloned().fold(0.0, f64::max);
            assert!(m > 0.6 && m <= 1.0);
        }
        checked += 1;
    }
}

fn naive_pck(pred: &[[f64; 2]], gt: &[[f64; 2]], vis: &[bool], alpha: f64, l: f64) -> Option<f64> {
    let mut n = 0usize;
    let mut ok = 0usize;
    for i in 0..gt.len() {
        if vis[i] {
            n += 1;
            let d = ((pred[i][0] - gt[i][0]).powi(2) + (pred[i][1] - gt[i][1]).powi(2)).sqrt();
            if d <= alpha * l {
                ok += 1;
            }
        }
    }
    (n > 0).then(|| ok as f64 / n as f64)
}

#[test]
fn pck_matches_distance_loop() {
    let mut r = rng(11);
    for i in 0..1000 {
        let k = r.gen_range(1..=8);
        let size = [32.0, 50.0, 64.0][r.gen_range(0..3)];
        let alpha = [0.05, 0.1, 0.2, 0.5, 1.0][r.gen_range(0..5)];
        // integer coordinates put some predictions exactly on the radius
        let integer = i % 2 == 0;
        let coord = |r: &mut ChaCha8Rng| {
            let v: f64 = r.gen_range(0.0..size);
            if integer { v.floor() } else { v }
        };
        let gt: Vec<[f64; 2]> = (0..k).map(|_| [coord(&mut r), coord(&mut r)]).collect();
        let pred: Vec<[f64; 2]> = gt
            .iter()
            .map(|g| {
                let dx: f64 = r.gen_range(-8.0..8.0);
                let dy: f64 = r.gen_range(-8.0..8.0);
                if integer { [g[0] + dx.round(), g[1] + dy.round()] } else { [g[0] + dx, g[1] + dy] }
            })
            .collect();
        let vis: Vec<bool> = (0..k).map(|_| r.gen_bool(0.7)).collect();
        let kps = KeypointSet::new(gt.clone(), vis.clone()).unwrap();
        let cfg = PckConfig::new(alpha, size).unwrap();
        let got = pck(&pred, &kps, &cfg).unwrap();
        match naive_pck(&pred, &gt, &vis, alpha, size) {
            Some(v) => assert_eq!(got, Ok(v), "instance {i}"),
            None => assert_eq!(got, Err(PckError::NoVisibleKeypoints)),
        }
    }
}

#[test]
fn pck_boundary_is_inclusive() {
    let gt = KeypointSet::all_visible(vec![[10.0, 10.0]]);
    let cfg = PckConfig::new(0.1, 50.0).unwrap();
    assert_eq!(pck(&[[13.0, 14.0]], &gt, &cfg).unwrap(), Ok(1.0));
    assert_eq!(pck(&[[13.0, 14.1]], &gt, &cfg).unwrap(), Ok(0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn pck_is_monotone_in_alpha(seed in any::<u64>(), a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut r = rng(seed);
        let k = r.gen_range(1..=10);
        let gt: Vec<[f64; 2]> = (0..k).map(|_| [r.gen_range(0.0..64.0), r.gen_range(0.0..64.0)]).collect();
        let pred: Vec<[f64; 2]> = (0..k).map(|_| [r.gen_range(0.0..64.0), r.gen_range(0.0..64.0)]).collect();
        let mut vis: Vec<bool> = (0..k).map(|_| r.gen_bool(0.6)).collect();
        vis[0] = true;
        let kps = KeypointSet::new(gt, vis).unwrap();
        let p_lo = pck(&pred, &kps, &PckConfig::new(lo, 64.0).unwrap()).unwrap().unwrap();
        let p_hi = pck(&pred, &kps, &PckConfig::new(hi, 64.0).unwrap()).unwrap().unwrap();
        prop_assert!(p_lo <= p_hi);
    }

    #[test]
    fn rendered_maps_lie_in_unit_interval(u in -20.0f64..40.0, v in -20.0f64..40.0, sigma in 0.5f64..3.0) {
        let kps = KeypointSet::all_visible(vec![[u, v]]);
        let m: Tensor<f64> = render_heatmaps(&kps, 16, 16, sigma).unwrap();
        prop_assert!(m.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        if (0.0..=15.0).contains(&u) && (0.0..=15.0).contains(&v) && u.fract() == 0.0 && v.fract() == 0.0 {
            prop_assert_eq!(m.data().iter().cloned().fold(0.0, f64::max), 1.0);
        }
    }
}
