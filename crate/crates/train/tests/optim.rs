use proptest::prelude::*;
use rhg_core::Tensor;
use rhg_train::config::TrainConfig;
use rhg_train::optim::{lr_schedule, rmsprop_step, OptimState};

fn t(v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(&[v.len()], v).unwrap()
}

#[test]
fn first_step_matches_closed_form() {
    let (rho, eps, lr) = (0.9, 1e-8, 0.01);
    let g = [0.5, -2.0, 1e-3, 0.0];
    let p0 = [1.0, 2.0, -3.0, 4.0];
    let mut p = t(&p0);
    let mut acc = t(&[0.0; 4]);
    rmsprop_step(&mut p, &t(&g), &mut acc, rho, eps, lr).unwrap();
    for i in 0..4 {
        let want = p0[i] - lr * g[i] / (((1.0 - rho) * g[i] * g[i]).sqrt() + eps);
        assert!((p.data()[i] - want).abs() < 1e-15, "{i}");
        assert!((acc.data()[i] - (1.0 - rho) * g[i] * g[i]).abs() < 1e-18);
    }
}

#[test]
fn zero_gradient_leaves_param_and_decays_accumulator() {
    let mut p = t(&[1.5, -0.5]);
    let mut acc = t(&[4.0, 0.25]);
    rmsprop_step(&mut p, &t(&[0.0, 0.0]), &mut acc, 0.9, 1e-8, 0.1).unwrap();
    assert_eq!(p.data(), &[1.5, -0.5]);
    assert!((acc.data()[0] - 3.6).abs() < 1e-15 && (acc.data()[1] - 0.225).abs() < 1e-15);
}

#[test]
fn constant_gradient_reaches_fixed_point() {
    let (lr, g) = (1e-3, -0.7);
    let mut p = t(&[0.0]);
    let mut acc = t(&[0.0]);
    let mut last = 0.0;
    for _ in 0..500 {
        let before = p.data()[0];
        rmsprop_step(&mut p, &t(&[g]), &mut acc, 0.9, 1e-8, lr).unwrap();
        last = p.data()[0] - before;
    }
    assert!((acc.data()[0] - g * g).abs() < 1e-12);
    assert!((last - lr).abs() < 1e-9, "{last}");
}

#[test]
fn quadratic_surrogate_converges() {
    // f(x) = (x - 3)^2 / 2 from x = 0 under a fast-decaying schedule
    let cfg = TrainConfig {
        base_lr: 0.05,
        decay_factor: 0.5,
        decay_every: 100,
        ..Default::default()
    };
    let mut state = OptimState::<f64>::new([&[1usize][..]], 0.9, 1e-8);
    let mut x = t(&[0.0]);
    for step in 0..1000 {
        let g = t(&[x.data()[0] - 3.0]);
        state.apply(&mut [&mut x], &[g], lr_schedule(step, &cfg)).unwrap();
    }
    assert_eq!(state.step, 1000);
    assert!((x.data()[0] - 3.0).abs() < 1e-3, "{}", x.data()[0]);
}

#[test]
fn schedule_examples() {
    let c = TrainConfig::default();
    assert_eq!(lr_schedule(0, &c), 2.5e-4);
    assert_eq!(lr_schedule(19_999, &c), 2.5e-4);
    assert_eq!(lr_schedule(20_000, &c), 2.4e-4);
}

proptest! {
    // at most 400 decays, far from underflow
    #[test]
    fn schedule_is_piecewise_constant_and_non_increasing(
        step in 0u64..2_000_000,
        every in 5_000u64..50_000,
        factor in 0.5f64..0.99,
    ) {
        let c = TrainConfig { decay_every: every, decay_factor: factor, ..Default::default() };
        let (a, b) = (lr_schedule(step, &c), lr_schedule(step + 1, &c));
        prop_assert!(b <= a);
        if (step + 1) % every == 0 {
            prop_assert!(b < a);
        } else {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn accumulators_stay_non_negative(
        grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 1..20),
        rho in 0.01f64..0.999,
    ) {
        let mut p = t(&[0.0; 5]);
        let mut acc = t(&[0.0; 5]);
        for g in grads {
            rmsprop_step(&mut p, &t(&g), &mut acc, rho, 1e-8, 1e-3).unwrap();
            prop_assert!(acc.data().iter().all(|&a| a >= 0.0));
            prop_assert!(p.data().iter().all(|v| v.is_finite()));
        }
    }
}
