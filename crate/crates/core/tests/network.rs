use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rhg_core::cell::CellKind;
use rhg_core::checkpoint;
use rhg_core::hourglass::{predict_sequence, sequence_forward, stacked_forward, HiddenStates, HourglassWeights, NetConfig, Runner};
use rhg_core::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn net(cell: CellKind, seed: u64) -> HourglassWeights<Tensor<f64>> {
    let mut r = rng(seed);
    let w = HourglassWeights::<Tensor<f64>>::xavier(NetConfig::new(2, 4, 3, cell), &mut r).unwrap();
    w.map(&mut |name, t| {
        if name.ends_with(".b") || name.contains(".b_") {
            Tensor::uniform(t.shape(), -0.3, 0.3, &mut r)
        } else {
            t.clone()
        }
    })
}

fn frame(seed: u64) -> Tensor<f64> {
    Tensor::uniform(&[2, 16, 32], 0.0, 1.0, &mut rng(seed))
}

#[test]
fn single_frame_sequence_equals_stacked_forward() {
    for cell in CellKind::ALL {
        let w = net(cell, 1);
        let f = frame(2);
        let mut tape = Tape::new();
        let wv = w.bind_constant(&mut tape);
        let fv = tape.constant(f.clone());
        let seq = sequence_forward(&mut tape, &wv, &[fv]).unwrap();
        let states = HiddenStates::zeros(&w.config, 16, 32).unwrap().bind_constant(&mut tape);
        let (outs, _) = stacked_forward(&mut tape, &wv, fv, &states).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq[0].len(), 2);
        for (a, b) in seq[0].iter().zip(&outs) {
            assert_eq!(tape.value(*a), tape.value(b.heatmaps));
            assert_eq!(tape.shape(*a), &[3, 16, 32]);
        }
    }
}

#[test]
fn repeated_frames_give_different_outputs_for_recurrent_cells() {
    for cell in [CellKind::ConvGru, CellKind::CoordConvGru] {
        let w = net(cell, 3);
        let f = frame(4);
        let out = predict_sequence(&w, &[f.clone(), f]).unwrap();
        let diff = out[0][1].max_abs_diff(&out[1][1]);
        assert!(diff > 1e-6, "{cell}: {diff}");
    }
    let w = net(CellKind::None, 3);
    let f = frame(4);
    let out = predict_sequence(&w, &[f.clone(), f]).unwrap();
    assert_eq!(out[0], out[1]);
}

#[test]
fn states_move_after_one_frame() {
    for cell in [CellKind::ConvGru, CellKind::CoordConvGru] {
        let w = net(cell, 5);
        let mut runner = Runner::new(&w);
        runner.step(&frame(6)).unwrap();
        let states = runner.states().unwrap();
        assert_eq!(states.states.len(), 8);
        let norm: f64 = states.states.iter().map(|s| s.l2_norm()).sum();
        assert!(norm > 1e-6);
        for (i, s) in states.states.iter().enumerate() {
            let l = i % 4 + 1;
            assert_eq!(s.shape(), &[4, 16 >> l, 32 >> l]);
        }
    }
}

#[test]
fn parameter_count_does_not_depend_on_sequence_length() {
    let w = net(CellKind::ConvGru, 7);
    let before = w.param_count();
    for t in [1, 4] {
        let frames: Vec<Tensor<f64>> = (0..t).map(|i| frame(i as u64)).collect();
        let out = predict_sequence(&w, &frames).unwrap();
        assert_eq!(out.len(), t);
        assert_eq!(w.param_count(), before);
    }
}

#[test]
fn forward_is_deterministic() {
    for cell in CellKind::ALL {
        let frames = [frame(8), frame(9)];
        let a = predict_sequence(&net(cell, 10).cast::<f32>(), &frames.iter().map(|f| f.cast()).collect::<Vec<_>>()).unwrap();
        let b = predict_sequence(&net(cell, 10).cast::<f32>(), &frames.iter().map(|f| f.cast()).collect::<Vec<_>>()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn checkpoint_round_trip_keeps_forward_bit_identical() {
    for cell in CellKind::ALL {
        let w = net(cell, 11).cast::<f32>();
        let frames: Vec<Tensor<f32>> = [frame(12), frame(13)].iter().map(|f| f.cast()).collect();
        let before = predict_sequence(&w, &frames).unwrap();
        let back: HourglassWeights<Tensor<f32>> = checkpoint::from_bytes(&checkpoint::to_bytes(&w)).unwrap();
        assert_eq!(back, w);
        assert_eq!(predict_sequence(&back, &frames).unwrap(), before);
    }
}

#[test]
fn empty_sequence_is_rejected() {
    let w = net(CellKind::None, 1);
    assert!(predict_sequence::<f64>(&w, &[]).is_err());
    let mut tape = Tape::<f64>::new();
    let wv = w.bind_constant(&mut tape);
    assert!(sequence_forward(&mut tape, &wv, &[]).is_err());
}
