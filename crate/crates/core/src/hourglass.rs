//! Two-stack recurrent hourglass.
//!
//! Each stack runs four conv + max-pool encoder levels (`H -> H/16`), a
//! bottleneck conv, and four conv + upsample decoder levels back to `H`.
//! The pooled feature at level `l` (resolution `H / 2^l`) goes through a skip
//! module, either a plain conv or a GRU cell carrying state across frames, and
//! is added back on the decoder side at the same resolution. The full
//! resolution decoder output is added to the stack input, passed through an
//! output conv and a 1x1 head that emits `K` heatmap logits.
//!
//! Stack two consumes stack one's features plus its heatmaps projected back to
//! `C` channels by a 1x1 conv. Every frame of a sequence reuses the same
//! weights; only the eight skip-cell states (two stacks by four levels) change.

use rand::Rng;

use crate::cell::{gru_step, CellKind, GruParams};
use crate::error::shape_err;
use crate::init::xavier_conv;
use crate::tensor::ConvSpec;
use crate::{Error, Real, Result, Tape, Tensor, Var};

pub const STACKS: usize = 2;
pub const LEVELS: usize = 4;
/// Spatial dims must be divisible by `2^LEVELS`.
pub const DIVISOR: usize = 1 << LEVELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub image_channels: usize,
    pub channels: usize,
    pub keypoints: usize,
    pub kernel: usize,
    pub cell: CellKind,
}

impl NetConfig {
    pub fn new(image_channels: usize, channels: usize, keypoints: usize, cell: CellKind) -> Self {
        Self {
            image_channels,
            channels,
            keypoints,
            kernel: 3,
            cell,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.channels == 0 || self.keypoints == 0 {
            return Err(Error::Invalid("network dims must be positive".into()));
        }
        ConvSpec::new(self.channels, self.channels, self.kernel).map(|_| ())
    }

    fn conv(&self, cin: usize, cout: usize) -> ConvSpec {
        ConvSpec::new(cin, cout, self.kernel).expect("validated config")
    }

    fn pointwise(&self, cin: usize, cout: usize) -> ConvSpec {
        ConvSpec::new(cin, cout, 1).expect("validated config")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<P> {
    pub w: P,
    pub b: P,
}

impl<T: Real> ConvParams<Tensor<T>> {
    pub fn zeros(spec: ConvSpec) -> Self {
        Self {
            w: Tensor::zeros(&spec.weight_shape()),
            b: Tensor::zeros(&[spec.out_channels]),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        Self {
            w: xavier_conv(&spec, rng),
            b: Tensor::zeros(&[spec.out_channels]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SkipParams<P> {
    Conv(ConvParams<P>),
    Gru(GruParams<P>),
}

impl<P> SkipParams<P> {
    pub fn kind(&self) -> CellKind {
        match self {
            SkipParams::Conv(_) => CellKind::None,
            SkipParams::Gru(g) => g.kind(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackWeights<P> {
    pub encoders: Vec<ConvParams<P>>,
    pub skips: Vec<SkipParams<P>>,
    pub bottleneck: ConvParams<P>,
    /// `decoders[l]` maps level `l + 1` up to level `l`.
    pub decoders: Vec<ConvParams<P>>,
    pub output: ConvParams<P>,
    pub head: ConvParams<P>,
}

/// Full network parameters, shared by every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct HourglassWeights<P> {
    pub config: NetConfig,
    pub pre: ConvParams<P>,
    pub stacks: Vec<StackWeights<P>>,
    /// `remaps[s]` projects stack `s` heatmaps into stack `s + 1` features.
    pub remaps: Vec<ConvParams<P>>,
}

fn visit_conv<'a, P>(prefix: &str, c: &'a ConvParams<P>, f: &mut dyn FnMut(&str, &'a P)) {
    f(&format!("{prefix}.w"), &c.w);
    f(&format!("{prefix}.b"), &c.b);
}

fn visit_conv_mut<P>(prefix: &str, c: &mut ConvParams<P>, f: &mut dyn FnMut(&str, &mut P)) {
    f(&format!("{prefix}.w"), &mut c.w);
    f(&format!("{prefix}.b"), &mut c.b);
}

fn map_conv<P, Q>(prefix: &str, c: &ConvParams<P>, f: &mut dyn FnMut(&str, &P) -> Q) -> ConvParams<Q> {
    ConvParams {
        w: f(&format!("{prefix}.w"), &c.w),
        b: f(&format!("{prefix}.b"), &c.b),
    }
}

impl<P> HourglassWeights<P> {
    /// Visits every parameter with its stable checkpoint name, in a fixed order.
    pub fn for_each<'a>(&'a self, f: &mut dyn FnMut(&str, &'a P)) {
        visit_conv("pre", &self.pre, f);
        for (s, st) in self.stacks.iter().enumerate() {
            for (l, c) in st.encoders.iter().enumerate() {
                visit_conv(&format!("stack{s}.enc{}", l + 1), c, f);
            }
            for (l, sk) in st.skips.iter().enumerate() {
                let prefix = format!("stack{s}.skip{}", l + 1);
                match sk {
                    SkipParams::Conv(c) => visit_conv(&prefix, c, f),
                    SkipParams::Gru(g) => {
                        g.map(|name, p| f(&format!("{prefix}.{name}"), p));
                    }
                }
            }
            visit_conv(&format!("stack{s}.bottleneck"), &st.bottleneck, f);
            for (l, c) in st.decoders.iter().enumerate() {
                visit_conv(&format!("stack{s}.dec{}", l + 1), c, f);
            }
            visit_conv(&format!("stack{s}.out"), &st.output, f);
            visit_conv(&format!("stack{s}.head"), &st.head, f);
            if let Some(r) = self.remaps.get(s) {
                visit_conv(&format!("remap{s}"), r, f);
            }
        }
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut P)) {
        visit_conv_mut("pre", &mut self.pre, f);
        for (s, st) in self.stacks.iter_mut().enumerate() {
            for (l, c) in st.encoders.iter_mut().enumerate() {
                visit_conv_mut(&format!("stack{s}.enc{}", l + 1), c, f);
            }
            for (l, sk) in st.skips.iter_mut().enumerate() {
                let prefix = format!("stack{s}.skip{}", l + 1);
                match sk {
                    SkipParams::Conv(c) => visit_conv_mut(&prefix, c, f),
                    SkipParams::Gru(g) => g.for_each_mut(|name, p| f(&format!("{prefix}.{name}"), p)),
                }
            }
            visit_conv_mut(&format!("stack{s}.bottleneck"), &mut st.bottleneck, f);
            for (l, c) in st.decoders.iter_mut().enumerate() {
                visit_conv_mut(&format!("stack{s}.dec{}", l + 1), c, f);
            }
            visit_conv_mut(&format!("stack{s}.out"), &mut st.output, f);
            visit_conv_mut(&format!("stack{s}.head"), &mut st.head, f);
            if let Some(r) = self.remaps.get_mut(s) {
                visit_conv_mut(&format!("remap{s}"), r, f);
            }
        }
    }

    /// Maps every parameter, visiting in the same order as [`Self::for_each`].
    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> HourglassWeights<Q> {
        let pre = map_conv("pre", &self.pre, f);
        let mut stacks = Vec::with_capacity(self.stacks.len());
        let mut remaps = Vec::with_capacity(self.remaps.len());
        for (s, st) in self.stacks.iter().enumerate() {
            let encoders = st
                .encoders
                .iter()
                .enumerate()
                .map(|(l, c)| map_conv(&format!("stack{s}.enc{}", l + 1), c, f))
                .collect();
            let skips = st
                .skips
                .iter()
                .enumerate()
                .map(|(l, sk)| {
                    let prefix = format!("stack{s}.skip{}", l + 1);
                    match sk {
                        SkipParams::Conv(c) => SkipParams::Conv(map_conv(&prefix, c, f)),
                        SkipParams::Gru(g) => {
                            SkipParams::Gru(g.map(|name, p| f(&format!("{prefix}.{name}"), p)))
                        }
                    }
                })
                .collect();
            let bottleneck = map_conv(&format!("stack{s}.bottleneck"), &st.bottleneck, f);
            let decoders = st
                .decoders
                .iter()
                .enumerate()
                .map(|(l, c)| map_conv(&format!("stack{s}.dec{}", l + 1), c, f))
                .collect();
            let output = map_conv(&format!("stack{s}.out"), &st.output, f);
            let head = map_conv(&format!("stack{s}.head"), &st.head, f);
            stacks.push(StackWeights {
                encoders,
                skips,
                bottleneck,
                decoders,
                output,
                head,
            });
            if let Some(r) = self.remaps.get(s) {
                remaps.push(map_conv(&format!("remap{s}"), r, f));
            }
        }
        HourglassWeights {
            config: self.config,
            pre,
            stacks,
            remaps,
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(&mut |n, _| out.push(n.to_string()));
        out
    }
}

impl<T: Real> HourglassWeights<Tensor<T>> {
    fn build(config: NetConfig, conv: &mut dyn FnMut(ConvSpec) -> ConvParams<Tensor<T>>, gru: &mut dyn FnMut(bool) -> Result<GruParams<Tensor<T>>>) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut stacks = Vec::with_capacity(STACKS);
        for _ in 0..STACKS {
            let encoders = (0..LEVELS).map(|_| conv(config.conv(c, c))).collect();
            let skips = (0..LEVELS)
                .map(|_| {
                    Ok(match config.cell {
                        CellKind::None => SkipParams::Conv(conv(config.conv(c, c))),
                        CellKind::ConvGru => SkipParams::Gru(gru(false)?),
                        CellKind::CoordConvGru => SkipParams::Gru(gru(true)?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stacks.push(StackWeights {
                encoders,
                skips,
                bottleneck: conv(config.conv(c, c)),
                decoders: (0..LEVELS).map(|_| conv(config.conv(c, c))).collect(),
                output: conv(config.conv(c, c)),
                head: conv(config.pointwise(c, config.keypoints)),
            });
        }
        Ok(Self {
            config,
            pre: conv(config.conv(config.image_channels, c)),
            stacks,
            remaps: (0..STACKS - 1)
                .map(|_| conv(config.pointwise(config.keypoints, c)))
                .collect(),
        })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        let (c, k) = (config.channels, config.kernel);
        Self::build(config, &mut |s| ConvParams::zeros(s), &mut |coord| {
            GruParams::zeros(c, k, coord)
        })
    }

    /// Xavier-uniform kernels and zero biases throughout.
    pub fn xavier<R: Rng>(config: NetConfig, rng: &mut R) -> Result<Self> {
        let (c, k) = (config.channels, config.kernel);
        let rng = std::cell::RefCell::new(rng);
        Self::build(
            config,
            &mut |s| ConvParams::xavier(s, &mut **rng.borrow_mut()),
            &mut |coord| GruParams::xavier(c, k, coord, &mut **rng.borrow_mut()),
        )
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.len());
        n
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.for_each(&mut |n, t| out.push((n.to_string(), t)));
        out
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> HourglassWeights<Var> {
        self.map(&mut |_, t| tape.leaf(t.clone()))
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_constant(&self, tape: &mut Tape<T>) -> HourglassWeights<Var> {
        self.map(&mut |_, t| tape.constant(t.clone()))
    }

    /// The same network with ConvGRU skip cells turned into CoordConvGRU cells
    /// whose coordinate-channel weights are zero.
    pub fn with_coord_cells(&self) -> Self {
        let mut out = self.clone();
        for st in &mut out.stacks {
            for sk in &mut st.skips {
                if let SkipParams::Gru(g) = sk {
                    *g = g.with_coord_channels();
                }
            }
        }
        if out.config.cell == CellKind::ConvGru {
            out.config.cell = CellKind::CoordConvGru;
        }
        out
    }

    pub fn cast<U: Real>(&self) -> HourglassWeights<Tensor<U>> {
        self.map(&mut |_, t| t.cast())
    }
}

/// One recurrent state per (stack, level), level `l` at `H / 2^l`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates<P> {
    pub states: Vec<P>,
}

impl<T: Real> HiddenStates<Tensor<T>> {
    pub fn zeros(config: &NetConfig, height: usize, width: usize) -> Result<Self> {
        check_divisible(height, width)?;
        let states = (0..STACKS)
            .flat_map(|_| {
                (1..=LEVELS).map(move |l| {
                    crate::cell::init_hidden(config.channels, height >> l, width >> l)
                })
            })
            .collect();
        Ok(Self { states })
    }

    pub fn bind_constant(&self, tape: &mut Tape<T>) -> HiddenStates<Var> {
        HiddenStates {
            states: self.states.iter().map(|s| tape.constant(s.clone())).collect(),
        }
    }
}

impl HiddenStates<Var> {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> HiddenStates<Tensor<T>> {
        HiddenStates {
            states: self.states.iter().map(|&s| tape.value(s).clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackOutput {
    pub heatmaps: Var,
    pub features: Var,
}

fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % DIVISOR != 0 || width % DIVISOR != 0 {
        return Err(Error::Indivisible {
            height,
            width,
            divisor: DIVISOR,
        });
    }
    Ok(())
}

fn conv_relu<T: Real>(tape: &mut Tape<T>, x: Var, c: &ConvParams<Var>) -> Result<Var> {
    let y = tape.conv2d(x, c.w, Some(c.b))?;
    Ok(tape.relu(y))
}

/// One hourglass stack. Returns the stack output and the updated skip states
/// (returned unchanged for `CellKind::None`).
pub fn hourglass_forward<T: Real>(
    tape: &mut Tape<T>,
    w: &StackWeights<Var>,
    x: Var,
    states_in: &[Var],
    cell: CellKind,
) -> Result<(StackOutput, Vec<Var>)> {
    let (c, height, width) = tape.value(x).chw("hourglass_forward")?;
    check_divisible(height, width)?;
    if w.skips.len() != LEVELS || w.encoders.len() != LEVELS || w.decoders.len() != LEVELS {
        return Err(Error::Invalid(format!("stack must have {LEVELS} levels")));
    }
    if let Some(sk) = w.skips.iter().find(|s| s.kind() != cell) {
        return Err(Error::Invalid(format!(
            "cell kind {cell} does not match skip weights of kind {}",
            sk.kind()
        )));
    }
    if cell.is_recurrent() {
        if states_in.len() != LEVELS {
            return Err(Error::Invalid(format!(
                "expected {LEVELS} skip states, got {}",
                states_in.len()
            )));
        }
        for (l, &s) in states_in.iter().enumerate() {
            let want = [c, height >> (l + 1), width >> (l + 1)];
            if tape.shape(s) != want {
                return Err(shape_err(
                    "hourglass_forward",
                    format!("state {} is {:?}, level expects {want:?}", l + 1, tape.shape(s)),
                ));
            }
        }
    }

    let mut skips = Vec::with_capacity(LEVELS);
    let mut states_out = states_in.to_vec();
    let mut prev = x;
    for l in 0..LEVELS {
        let a = conv_relu(tape, prev, &w.encoders[l])?;
        let pooled = tape.maxpool2(a)?;
        let s = match &w.skips[l] {
            SkipParams::Conv(cp) => conv_relu(tape, pooled, cp)?,
            SkipParams::Gru(g) => {
                let trace = gru_step(tape, g, states_in[l], pooled)?;
                states_out[l] = trace.h;
                trace.h
            }
        };
        skips.push(s);
        prev = pooled;
    }

    let b = conv_relu(tape, prev, &w.bottleneck)?;
    let mut h = tape.add(b, skips[LEVELS - 1])?;
    for l in (0..LEVELS).rev() {
        let d = conv_relu(tape, h, &w.decoders[l])?;
        let up = tape.upsample_nearest2(d)?;
        let skip = if l > 0 { skips[l - 1] } else { x };
        h = tape.add(up, skip)?;
    }
    let features = conv_relu(tape, h, &w.output)?;
    let heatmaps = tape.conv2d(features, w.head.w, Some(w.head.b))?;
    Ok((StackOutput { heatmaps, features }, states_out))
}

/// Both stacks on one preprocessed frame.
pub fn stacked_forward<T: Real>(
    tape: &mut Tape<T>,
    w: &HourglassWeights<Var>,
    image: Var,
    states_in: &HiddenStates<Var>,
) -> Result<(Vec<StackOutput>, HiddenStates<Var>)> {
    let cfg = w.config;
    let (ci, _, _) = tape.value(image).chw("stacked_forward")?;
    if ci != cfg.image_channels {
        return Err(shape_err(
            "stacked_forward",
            format!("image has {ci} channels, network expects {}", cfg.image_channels),
        ));
    }
    if states_in.states.len() != STACKS * LEVELS {
        return Err(Error::Invalid(format!(
            "expected {} hidden states, got {}",
            STACKS * LEVELS,
            states_in.states.len()
        )));
    }
    let mut x = conv_relu(tape, image, &w.pre)?;
    let mut outputs = Vec::with_capacity(STACKS);
    let mut states_out = Vec::with_capacity(STACKS * LEVELS);
    for (s, st) in w.stacks.iter().enumerate() {
        let st_in = &states_in.states[s * LEVELS..(s + 1) * LEVELS];
        let (out, st_out) = hourglass_forward(tape, st, x, st_in, cfg.cell)?;
        states_out.extend(st_out);
        if let Some(r) = w.remaps.get(s) {
            let back = tape.conv2d(out.heatmaps, r.w, Some(r.b))?;
            x = tape.add(out.features, back)?;
        }
        outputs.push(out);
    }
    Ok((outputs, HiddenStates { states: states_out }))
}

/// Runs every frame with shared weights, threading hidden states from zero.
/// Returns per frame the heatmap logits of each stack.
pub fn sequence_forward<T: Real>(
    tape: &mut Tape<T>,
    w: &HourglassWeights<Var>,
    frames: &[Var],
) -> Result<Vec<Vec<Var>>> {
    let first = *frames
        .first()
        .ok_or_else(|| Error::Invalid("empty frame sequence".into()))?;
    let shape = tape.shape(first).to_vec();
    if let Some(bad) = frames.iter().find(|&&f| tape.shape(f) != shape.as_slice()) {
        return Err(shape_err(
            "sequence_forward",
            format!("frame shape {:?} differs from {shape:?}", tape.shape(*bad)),
        ));
    }
    let (_, height, width) = tape.value(first).chw("sequence_forward")?;
    let mut states = HiddenStates::<Tensor<T>>::zeros(&w.config, height, width)?.bind_constant(tape);
    let mut out = Vec::with_capacity(frames.len());
    for &f in frames {
        let (outs, next) = stacked_forward(tape, w, f, &states)?;
        out.push(outs.iter().map(|o| o.heatmaps).collect());
        states = next;
    }
    Ok(out)
}

/// Frame-by-frame inference with hidden states carried between calls.
pub struct Runner<'a, T: Real> {
    weights: &'a HourglassWeights<Tensor<T>>,
    states: Option<HiddenStates<Tensor<T>>>,
}

impl<'a, T: Real> Runner<'a, T> {
    pub fn new(weights: &'a HourglassWeights<Tensor<T>>) -> Self {
        Self {
            weights,
            states: None,
        }
    }

    pub fn reset(&mut self) {
        self.states = None;
    }

    pub fn states(&self) -> Option<&HiddenStates<Tensor<T>>> {
        self.states.as_ref()
    }

    /// Heatmap logits of every stack for the next frame.
    pub fn step(&mut self, frame: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (_, height, width) = frame.chw("Runner::step")?;
        let states = match self.states.take() {
            Some(s) => s,
            None => HiddenStates::zeros(&self.weights.config, height, width)?,
        };
        let mut tape = Tape::new();
        let w = self.weights.bind_constant(&mut tape);
        let img = tape.constant(frame.clone());
        let sv = states.bind_constant(&mut tape);
        let (outs, next) = stacked_forward(&mut tape, &w, img, &sv)?;
        self.states = Some(next.values(&tape));
        Ok(outs.iter().map(|o| tape.value(o.heatmaps).clone()).collect())
    }
}

/// Heatmaps of every stack of every frame, evaluated without gradients.
pub fn predict_sequence<T: Real>(
    weights: &HourglassWeights<Tensor<T>>,
    frames: &[Tensor<T>],
) -> Result<Vec<Vec<Tensor<T>>>> {
    if frames.is_empty() {
        return Err(Error::Invalid("empty frame sequence".into()));
    }
    let mut runner = Runner::new(weights);
    frames.iter().map(|f| runner.step(f)).collect()
}
