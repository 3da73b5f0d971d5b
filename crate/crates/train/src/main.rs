use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rhg_core::cell::CellKind;
use rhg_core::checkpoint;
use rhg_core::gradsuite::{self, Module};
use rhg_synth::dataset::{generate_dataset, Dataset, DatasetConfig};
use rhg_train::bench::{bench, bench_weights, BenchConfig};
use rhg_train::config::TrainConfig;
use rhg_train::eval::{evaluate, Scoring, DEFAULT_ALPHAS};
use rhg_train::train::{train, TrainData};
use rhg_train::{Error, Result};

#[derive(Parser)]
#[command(name = "rhg", version, about = "Recurrent stacked-hourglass keypoint localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic keypoint-sequence dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network; prints one `step=<n> lr=<v> loss=<v>` line per step.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also append trace lines to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// PCK of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ALPHAS)]
        alpha: Vec<f64>,
        /// Score occluded keypoints instead of visible ones.
        #[arg(long)]
        occluded: bool,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        /// ops, convgru, coordconvgru or network; all when omitted.
        #[arg(long)]
        module: Option<String>,
    },
    /// Median per-frame forward time of each cell kind.
    Bench {
        /// Take the network shape (and, for its own cell kind, the weights)
        /// from this checkpoint instead of the 64x64, C=36, K=36 default.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// none, convgru or coordconvgru; all when omitted.
        #[arg(long)]
        cell: Option<String>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

fn load_ckpt(path: &Path) -> Result<rhg_core::hourglass::HourglassWeights<rhg_core::Tensor<f32>>> {
    checkpoint::load(path).map_err(|e| match e {
        rhg_core::Error::Io(io) => Error::Io {
            path: path.to_path_buf(),
            source: Box::new(io),
        },
        other => Error::Core(other),
    })
}

fn parse_cell(s: &str) -> Result<CellKind> {
    s.parse().map_err(|e: rhg_core::Error| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    let mut out = io::stdout().lock();
    let w = |out: &mut io::StdoutLock, s: &str| -> Result<()> {
        out.write_all(s.as_bytes()).map_err(|e| Error::Io {
            path: "stdout".into(),
            source: Box::new(e),
        })
    };
    match cli.command {
        Command::GenData { config, out: dir, seed } => {
            let cfg = match config {
                Some(p) => DatasetConfig::parse(&read_text(&p)?)?,
                None => DatasetConfig::default(),
            };
            let m = generate_dataset(&cfg, seed, &dir)?;
            w(&mut out, &format!("generated count={} frames={} dir={}\n", m.count, m.count * m.frames, dir.display()))
        }
        Command::Train {
            config,
            data,
            out: ckpt,
            resume,
            trace,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::parse(&read_text(&p)?)?,
                None => TrainConfig::default(),
            };
            if data.is_some() {
                cfg.data = data;
            }
            if ckpt.is_some() {
                cfg.checkpoint = ckpt;
            }
            let dir = cfg
                .data
                .clone()
                .ok_or_else(|| Error::Config("no dataset: pass --data or set `data` in the config".into()))?;
            if cfg.checkpoint.is_none() {
                return Err(Error::Config("no checkpoint path: pass --out or set `checkpoint`".into()));
            }
            let data = TrainData::load(&dir, cfg.sigma)?;
            let mut sink = Tee {
                out,
                file: match &trace {
                    Some(p) => Some(fs::File::create(p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: Box::new(e),
                    })?),
                    None => None,
                },
            };
            train(&cfg, &data, resume.as_deref(), &mut sink)?;
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            alpha,
            occluded,
        } => {
            if alpha.iter().any(|a| !(*a > 0.0)) {
                return Err(Error::Config("alpha values must be positive".into()));
            }
            let weights = load_ckpt(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let scoring = if occluded { Scoring::Occluded } else { Scoring::Visible };
            let report = evaluate(&weights, &ds.sequences, &alpha, scoring)?;
            w(&mut out, &report.machine_lines())
        }
        Command::GradCheck { module } => {
            let modules = match module {
                Some(m) => vec![m.parse::<Module>().map_err(|e| Error::Config(e.to_string()))?],
                None => Module::ALL.to_vec(),
            };
            let mut failed = Vec::new();
            for m in modules {
                for c in gradsuite::run(m)? {
                    w(
                        &mut out,
                        &format!(
                            "gradcheck module={} case=\"{}\" max_rel_err={:.3e} checked={} pass={}\n",
                            c.module,
                            c.name,
                            c.report.max_rel_error,
                            c.report.checked,
                            c.passed()
                        ),
                    )?;
                    if !c.passed() {
                        failed.push(format!("{} {}", c.module, c.name));
                    }
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::GradCheck(failed.join("; ")))
            }
        }
        Command::Bench {
            ckpt,
            cell,
            height,
            width,
            frames,
        } => {
            let cells = match cell {
                Some(c) => vec![parse_cell(&c)?],
                None => CellKind::ALL.to_vec(),
            };
            let mut cfg = BenchConfig::default();
            let report = match ckpt {
                Some(p) => {
                    let base = load_ckpt(&p)?;
                    let c = base.config;
                    cfg.image_channels = c.image_channels;
                    cfg.channels = c.channels;
                    cfg.keypoints = c.keypoints;
                    apply_dims(&mut cfg, height, width, frames);
                    let nets = cells
                        .iter()
                        .map(|&k| {
                            if k == c.cell {
                                Ok(base.clone())
                            } else {
                                let net = rhg_core::hourglass::NetConfig { cell: k, ..c };
                                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
                                Ok(rhg_core::hourglass::HourglassWeights::xavier(net, &mut rng)?)
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    bench_weights(&nets, &cfg)?
                }
                None => {
                    apply_dims(&mut cfg, height, width, frames);
                    bench(&cells, &cfg)?
                }
            };
            w(&mut out, &report.to_string())
        }
    }
}

fn apply_dims(cfg: &mut BenchConfig, height: Option<usize>, width: Option<usize>, frames: Option<usize>) {
    cfg.height = height.unwrap_or(cfg.height);
    cfg.width = width.unwrap_or(cfg.width);
    cfg.frames = frames.unwrap_or(cfg.frames);
}

struct Tee<'a> {
    out: io::StdoutLock<'a>,
    file: Option<fs::File>,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.out.write_all(buf)?;
        if let Some(f) = &mut self.file {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()?;
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

fn one_line(s: &str) -> String {
    s.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ").replace('"', "'")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage message=\"{}\"", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message=\"{}\"", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
