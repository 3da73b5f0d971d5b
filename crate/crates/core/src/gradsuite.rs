//! The standard battery of finite-difference checks, grouped by module so
//! the CLI and tests can run any part of it.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cell::{gru_step, CellKind, GruParams};
use crate::gradcheck::{grad_check_report, GradCheckReport, Probe};
use crate::hourglass::{sequence_forward, HourglassWeights, NetConfig};
use crate::loss::{render_heatmaps, sequence_loss, KeypointSet};
use crate::{Error, Result, Tape, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    Ops,
    ConvGru,
    CoordConvGru,
    Network,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::Ops, Module::ConvGru, Module::CoordConvGru, Module::Network];
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Ops => "ops",
            Module::ConvGru => "convgru",
            Module::CoordConvGru => "coordconvgru",
            Module::Network => "network",
        })
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown grad-check module {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub module: Module,
    pub name: String,
    pub report: GradCheckReport,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOL
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Reduces a node to a scalar with fixed random weights so every output
/// element gets a distinct cotangent.
pub fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let probe = rand_t(tape.shape(v), &mut rng(seed));
    let p = tape.constant(probe);
    let m = tape.mul(v, p)?;
    Ok(tape.sum(m))
}

const SHAPES: [[usize; 3]; 3] = [[1, 2, 2], [2, 4, 6], [3, 6, 4]];

type Op = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn ops() -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let mut run = |name: String, f: Op, inputs: Vec<Tensor<f64>>| -> Result<()> {
        out.push((name, grad_check_report(f, &inputs, EPS, Probe::All)?));
        Ok(())
    };
    for (i, &[c, h, w]) in SHAPES.iter().enumerate() {
        for k in [1, 3, 5] {
            let mut r = rng(i as u64 * 10 + k as u64);
            let inputs = vec![rand_t(&[c, h, w], &mut r), rand_t(&[2, c, k, k], &mut r), rand_t(&[2], &mut r)];
            run(
                format!("conv2d {c}x{h}x{w} k{k}"),
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]))?;
                    weighted_sum(t, y, 7)
                },
                inputs,
            )?;
        }
        let mut r = rng(100 + i as u64);
        let a = rand_t(&[c, h, w], &mut r);
        let b = rand_t(&[c, h, w], &mut r);
        let y = rand_t(&[2, h, w], &mut r);
        let elementwise: [(&str, Op); 10] = [
            ("sigmoid", |t, v| {
                let y = t.sigmoid(v[0]);
                weighted_sum(t, y, 3)
            }),
            ("tanh", |t, v| {
                let y = t.tanh(v[0]);
                weighted_sum(t, y, 3)
            }),
            ("relu", |t, v| {
                let y = t.relu(v[0]);
                weighted_sum(t, y, 3)
            }),
            ("one_minus", |t, v| {
                let y = t.one_minus(v[0]);
                weighted_sum(t, y, 3)
            }),
            ("add", |t, v| {
                let y = t.add(v[0], v[1])?;
                weighted_sum(t, y, 3)
            }),
            ("sub", |t, v| {
                let y = t.sub(v[0], v[1])?;
                weighted_sum(t, y, 3)
            }),
            ("mul", |t, v| {
                let y = t.mul(v[0], v[1])?;
                weighted_sum(t, y, 3)
            }),
            ("scale", |t, v| {
                let s = t.scale(v[0], -0.75);
                let q = t.mul(s, v[0])?;
                Ok(t.sum(q))
            }),
            ("maxpool2", |t, v| {
                let y = t.maxpool2(v[0])?;
                weighted_sum(t, y, 1)
            }),
            ("upsample2", |t, v| {
                let y = t.upsample_nearest2(v[0])?;
                weighted_sum(t, y, 2)
            }),
        ];
        for (name, f) in elementwise {
            run(format!("{name} {c}x{h}x{w}"), f, vec![a.clone(), b.clone()])?;
        }
        run(
            format!("concat {c}x{h}x{w}"),
            |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                weighted_sum(t, y, 3)
            },
            vec![a.clone(), y],
        )?;
    }

    let mut r = rng(300);
    let logits = Tensor::uniform(&[3, 6, 6], -4.0, 4.0, &mut r);
    let kps = KeypointSet::all_visible(vec![[1.0, 2.0], [4.5, 3.0], [5.0, 5.0]]);
    let target: Tensor<f64> = render_heatmaps(&kps, 6, 6, 1.0)?;
    out.push((
        "sigmoid_ce".to_string(),
        grad_check_report(|t, v| t.sigmoid_ce(v[0], &target), &[logits], EPS, Probe::All)?,
    ));
    Ok(out)
}

/// The nine cell parameters followed by `h_prev` and `x`.
fn gru_inputs(coord: bool, seed: u64) -> Result<Vec<Tensor<f64>>> {
    let mut r = rng(seed);
    let p = GruParams::<Tensor<f64>>::random(3, 3, coord, 0.5, &mut r)?;
    let mut v: Vec<Tensor<f64>> = Vec::new();
    p.map(|_, t| v.push(t.clone()));
    v.push(rand_t(&[3, 4, 6], &mut r));
    v.push(rand_t(&[3, 4, 6], &mut r));
    Ok(v)
}

fn gru(coord: bool) -> Result<Vec<(String, GradCheckReport)>> {
    (0..3)
        .map(|seed| {
            let inputs = gru_inputs(coord, if coord { 500 } else { 400 } + seed)?;
            let rep = grad_check_report(
                |t, v| {
                    let p = GruParams::from_ordered(std::array::from_fn(|i| v[i]), coord);
                    let tr = gru_step(t, &p, v[9], v[10])?;
                    weighted_sum(t, tr.h, 5)
                },
                &inputs,
                EPS,
                Probe::All,
            )?;
            Ok((format!("step seed {seed}"), rep))
        })
        .collect()
}

/// Every parameter tensor of a 16x16, C=4, K=2 network over two frames (up
/// to 32 sampled elements each), loss summed over frames and stacks.
pub fn network(cell: CellKind, seed: u64) -> Result<GradCheckReport> {
    let cfg = NetConfig::new(1, 4, 2, cell);
    let mut r = rng(seed);
    let w = HourglassWeights::<Tensor<f64>>::xavier(cfg, &mut r)?;
    // biases bounded away from zero keep pre-activations off the ReLU kink
    let w = w.map(&mut |name, t| {
        if name.ends_with(".b") || name.contains(".b_") {
            let mag = Tensor::<f64>::uniform(t.shape(), 0.3, 1.0, &mut r);
            let sign = Tensor::<f64>::uniform(t.shape(), -1.0, 1.0, &mut r);
            mag.zip_map(&sign, "bias", |m, s| if s < 0.0 { -m } else { m })
                .expect("same shape")
        } else {
            t.clone()
        }
    });
    let frames: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut r)).collect();
    let targets = (0..2)
        .map(|i| {
            let kps = KeypointSet::all_visible(vec![[3.0 + i as f64, 5.0], [11.0, 9.0 - i as f64]]);
            render_heatmaps(&kps, 16, 16, 1.0)
        })
        .collect::<Result<Vec<Tensor<f64>>>>()?;
    let mut params = Vec::new();
    w.for_each(&mut |_, t| params.push(t.clone()));
    grad_check_report(
        |t, v| {
            let mut i = 0;
            let wv = w.map(&mut |_, _| {
                i += 1;
                v[i - 1]
            });
            let fr: Vec<Var> = frames.iter().map(|f| t.constant(f.clone())).collect();
            let outs = sequence_forward(t, &wv, &fr)?;
            let pairs: Vec<(Var, &Tensor<f64>)> = outs
                .iter()
                .zip(&targets)
                .flat_map(|(stacks, z)| stacks.iter().map(move |&x| (x, z)))
                .collect();
            sequence_loss(t, &pairs)
        },
        &params,
        EPS,
        Probe::Sample { per_input: 32, seed },
    )
}

pub fn run(module: Module) -> Result<Vec<Check>> {
    let named = match module {
        Module::Ops => ops()?,
        Module::ConvGru => gru(false)?,
        Module::CoordConvGru => gru(true)?,
        Module::Network => CellKind::ALL
            .into_iter()
            .map(|c| Ok((format!("{c} 16x16 C4 K2 T2"), network(c, 600)?)))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(named
        .into_iter()
        .map(|(name, report)| Check { module, name, report })
        .collect())
}
