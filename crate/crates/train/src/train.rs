//! Two-phase training: single frames first, then unrolled sequences.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rhg_core::checkpoint;
use rhg_core::hourglass::{sequence_forward, HourglassWeights, NetConfig};
use rhg_core::loss::{render_heatmaps, sequence_loss};
use rhg_core::{Tape, Tensor, Var};
use rhg_synth::dataset::{Dataset, Sequence};

use crate::config::TrainConfig;
use crate::error::io_err;
use crate::optim::{lr_schedule, rmsprop_step, OptimState};
use crate::{Error, Result};

/// Sequences with their target heatmaps rendered once up front.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub sequences: Vec<Sequence>,
    targets: Vec<Vec<Tensor<f32>>>,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub keypoints: usize,
}

impl TrainData {
    pub fn new(sequences: Vec<Sequence>, sigma: f64) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::Data("dataset has no sequences".into()))?;
        let (channels, height, width) = first
            .frames
            .first()
            .ok_or_else(|| Error::Data("sequence has no frames".into()))?
            .chw("TrainData")?;
        let (frames, keypoints) = (first.len(), first.labels[0].len());
        let mut targets = Vec::with_capacity(sequences.len());
        for (i, s) in sequences.iter().enumerate() {
            if s.len() != frames || s.labels.len() != frames {
                return Err(Error::Data(format!("sequence {i} has {} frames, expected {frames}", s.len())));
            }
            let mut per_frame = Vec::with_capacity(frames);
            for (f, l) in s.frames.iter().zip(&s.labels) {
                if f.shape() != [channels, height, width] || l.len() != keypoints {
                    return Err(Error::Data(format!("sequence {i} disagrees with sequence 0 in shape")));
                }
                per_frame.push(render_heatmaps(l, height, width, sigma)?);
            }
            targets.push(per_frame);
        }
        Ok(Self {
            sequences,
            targets,
            frames,
            channels,
            height,
            width,
            keypoints,
        })
    }

    pub fn load(dir: &Path, sigma: f64) -> Result<Self> {
        Self::new(Dataset::load(dir)?.sequences, sigma)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn net_config(&self, cfg: &TrainConfig) -> NetConfig {
        NetConfig::new(self.channels, cfg.channels, self.keypoints, cfg.cell)
    }
}

/// Loss summed over frames and stacks for one sample, and its gradient
/// for every parameter in [`HourglassWeights::for_each`] order.
pub fn sample_gradients(
    w: &HourglassWeights<Tensor<f32>>,
    frames: &[Tensor<f32>],
    targets: &[Tensor<f32>],
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let wv = w.bind(&mut tape);
    let fv: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
    let outs = sequence_forward(&mut tape, &wv, &fv)?;
    let pairs: Vec<(Var, &Tensor<f32>)> = outs
        .iter()
        .zip(targets)
        .flat_map(|(stacks, z)| stacks.iter().map(move |&x| (x, z)))
        .collect();
    let loss = sequence_loss(&mut tape, &pairs)?;
    let value = tape.value(loss).item() as f64;
    let mut grads = tape.backward(loss)?;
    let mut out = Vec::new();
    wv.for_each(&mut |_, &v| {
        out.push(grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))));
    });
    Ok((value, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Independent single frames.
    Static,
    /// Unrolled sequences through the recurrent cells.
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub phase: Phase,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} lr={} loss={}", self.step, self.lr, self.loss)
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub weights: HourglassWeights<Tensor<f32>>,
    pub optim: OptimState<f32>,
    /// First step of phase two once it is known.
    pub phase2_start: Option<u64>,
    /// Recent phase-one losses for the plateau detector.
    recent: Vec<f64>,
}

/// Xavier initialization drawn from the configured seed.
pub fn init_weights(cfg: &TrainConfig, net: NetConfig) -> Result<HourglassWeights<Tensor<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(HourglassWeights::xavier(net, &mut rng)?)
}

fn shapes(w: &HourglassWeights<Tensor<f32>>) -> Vec<Vec<usize>> {
    let mut v = Vec::new();
    w.for_each(&mut |_, t| v.push(t.shape().to_vec()));
    v
}

fn state_paths(ckpt: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = ckpt.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".optim"), with(".state"))
}

impl Trainer {
    pub fn new(cfg: TrainConfig, net: NetConfig) -> Result<Self> {
        let weights = init_weights(&cfg, net)?;
        Self::with_weights(cfg, weights)
    }

    pub fn with_weights(cfg: TrainConfig, weights: HourglassWeights<Tensor<f32>>) -> Result<Self> {
        cfg.validate()?;
        if weights.config.cell != cfg.cell || weights.config.channels != cfg.channels {
            return Err(Error::Config(format!(
                "weights are {} with {} channels, config asks for {} with {}",
                weights.config.cell, weights.config.channels, cfg.cell, cfg.channels
            )));
        }
        let sh = shapes(&weights);
        let optim = OptimState::new(sh.iter().map(|s| s.as_slice()), cfg.rho, cfg.eps_opt);
        Ok(Self {
            cfg,
            weights,
            optim,
            phase2_start: None,
            recent: Vec::new(),
        })
    }

    /// Index of the next step to run.
    pub fn step_index(&self) -> u64 {
        self.optim.step
    }

    pub fn phase(&self) -> Phase {
        let s = self.step_index();
        match self.phase2_start {
            Some(p) if s >= p => Phase::Sequence,
            _ if s >= self.cfg.phase1_steps => Phase::Sequence,
            _ => Phase::Static,
        }
    }

    fn batch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step_index() + 1);
        rng
    }

    /// One optimizer step. Samples are drawn from a stream keyed by the step
    /// index, so a resumed run continues exactly where it left off.
    pub fn step(&mut self, data: &TrainData) -> Result<TraceEntry> {
        let step = self.step_index();
        let phase = self.phase();
        if phase == Phase::Sequence && self.phase2_start.is_none() {
            self.phase2_start = Some(step);
        }
        let net = &self.weights.config;
        if net.image_channels != data.channels || net.keypoints != data.keypoints {
            return Err(Error::Data(format!(
                "network expects {} image channels and {} keypoints, data has {} and {}",
                net.image_channels, net.keypoints, data.channels, data.keypoints
            )));
        }
        if phase == Phase::Sequence && self.cfg.seq_len > data.frames {
            return Err(Error::Config(format!(
                "seq_len {} exceeds the {} frames per sequence",
                self.cfg.seq_len, data.frames
            )));
        }

        let mut rng = self.batch_rng();
        let (batch, span) = match phase {
            Phase::Static => (self.cfg.phase1_batch, 1),
            Phase::Sequence => (self.cfg.phase2_batch, self.cfg.seq_len),
        };
        let mut total = 0.0;
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        for _ in 0..batch {
            let i = rng.gen_range(0..data.len());
            let start = rng.gen_range(0..=data.frames - span);
            let frames = &data.sequences[i].frames[start..start + span];
            let targets = &data.targets[i][start..start + span];
            let (loss, grads) = sample_gradients(&self.weights, frames, targets)?;
            total += loss;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let loss = total / batch as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let inv = 1.0 / batch as f32;
        let grads: Vec<Tensor<f32>> = sum.expect("batch is non-empty").iter().map(|g| g.scale(inv)).collect();
        let lr = lr_schedule(step, &self.cfg);
        self.apply(&grads, lr)?;

        if phase == Phase::Static {
            self.observe_plateau(step, loss);
        }
        Ok(TraceEntry { step, lr, loss, phase })
    }

    fn apply(&mut self, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if grads.len() != self.optim.acc.len() {
            return Err(Error::Data("gradient count does not match parameters".into()));
        }
        let (rho, eps) = (self.optim.rho, self.optim.eps);
        let acc = &mut self.optim.acc;
        let mut i = 0;
        let mut res = Ok(());
        self.weights.for_each_mut(&mut |_, p| {
            if res.is_ok() {
                res = rmsprop_step(p, &grads[i], &mut acc[i], rho, eps, lr);
            }
            i += 1;
        });
        res?;
        self.optim.step += 1;
        Ok(())
    }

    fn observe_plateau(&mut self, step: u64, loss: f64) {
        let w = self.cfg.plateau_window;
        if w == 0 {
            return;
        }
        self.recent.push(loss);
        if self.recent.len() > 2 * w {
            self.recent.remove(0);
        }
        if self.recent.len() == 2 * w {
            let prev: f64 = self.recent[..w].iter().sum::<f64>() / w as f64;
            let cur: f64 = self.recent[w..].iter().sum::<f64>() / w as f64;
            if (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < self.cfg.plateau_tol {
                self.phase2_start = Some(step + 1);
            }
        }
    }

    /// Steps until `cfg.steps`, handing each trace entry to `observe`.
    pub fn run(
        &mut self,
        data: &TrainData,
        observe: &mut dyn FnMut(&Trainer, &TraceEntry) -> Result<()>,
    ) -> Result<Vec<TraceEntry>> {
        let mut trace = Vec::new();
        while self.step_index() < self.cfg.steps {
            let e = self.step(data)?;
            observe(self, &e)?;
            trace.push(e);
        }
        Ok(trace)
    }

    /// Writes the weights to `ckpt` and the optimizer state next to it
    /// (`<ckpt>.optim`, `<ckpt>.state`).
    pub fn save(&self, ckpt: &Path) -> Result<()> {
        checkpoint::save(&self.weights, ckpt).map_err(io_err(ckpt))?;
        let (optim, state) = state_paths(ckpt);
        let names = self.weights.names();
        let named: Vec<(&String, &Tensor<f32>)> = names.iter().zip(&self.optim.acc).collect();
        let mut bytes = Vec::new();
        checkpoint::write_named(&named, &mut bytes)?;
        fs::write(&optim, bytes).map_err(io_err(&optim))?;
        let recent: Vec<String> = self.recent.iter().map(|l| l.to_string()).collect();
        let text = format!(
            "step={}\nphase2_start={}\nrecent={}\n",
            self.optim.step,
            self.phase2_start.map_or("none".to_string(), |s| s.to_string()),
            recent.join(",")
        );
        fs::write(&state, text).map_err(io_err(&state))?;
        Ok(())
    }

    /// Continues from a checkpoint. Without the optimizer files beside it the
    /// weights are taken as a warm start at step 0.
    pub fn resume(cfg: TrainConfig, ckpt: &Path) -> Result<Self> {
        let weights = checkpoint::load(ckpt).map_err(io_err(ckpt))?;
        let mut t = Self::with_weights(cfg, weights)?;
        let (optim, state) = state_paths(ckpt);
        if !optim.exists() || !state.exists() {
            return Ok(t);
        }
        let bytes = fs::read(&optim).map_err(io_err(&optim))?;
        let named = checkpoint::read_named::<f32>(&bytes)?;
        let names = t.weights.names();
        if named.len() != names.len() {
            return Err(Error::Data(format!("{}: wrong number of accumulators", optim.display())));
        }
        for ((n, a), (want, slot)) in named.into_iter().zip(names.iter().zip(&mut t.optim.acc)) {
            if &n != want || a.shape() != slot.shape() {
                return Err(Error::Data(format!("{}: accumulator {n} does not match {want}", optim.display())));
            }
            *slot = a;
        }
        let text = fs::read_to_string(&state).map_err(io_err(&state))?;
        let bad = || Error::Data(format!("{}: malformed state", state.display()));
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            match k {
                "step" => t.optim.step = v.parse().map_err(|_| bad())?,
                "phase2_start" => {
                    t.phase2_start = if v == "none" { None } else { Some(v.parse().map_err(|_| bad())?) }
                }
                "recent" => {
                    t.recent = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?
                }
                _ => return Err(bad()),
            }
        }
        Ok(t)
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub trace: Vec<TraceEntry>,
}

/// Full training run: initial (or resumed) weights, trace lines to `trace`,
/// checkpoints every `cfg.checkpoint_every` steps and at the end.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    resume: Option<&Path>,
    trace_out: &mut dyn Write,
) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), p)?,
        None => Trainer::new(cfg.clone(), data.net_config(cfg))?,
    };
    let ckpt = cfg.checkpoint.clone();
    let every = cfg.checkpoint_every;
    let trace = trainer.run(data, &mut |t, e| {
        writeln!(trace_out, "{e}").map_err(io_err("trace"))?;
        if let Some(p) = &ckpt {
            if every > 0 && (e.step + 1) % every == 0 {
                t.save(p)?;
            }
        }
        Ok(())
    })?;
    if let Some(p) = &ckpt {
        trainer.save(p)?;
    }
    Ok(TrainOutcome { trainer, trace })
}
