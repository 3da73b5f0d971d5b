//! Training configuration.

use std::path::PathBuf;

use rhg_core::cell::CellKind;
use rhg_core::hourglass::STACKS;
use rhg_synth::config::KeyValues;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub rho: f64,
    pub eps_opt: f64,
    /// Single frames per phase-one step.
    pub phase1_batch: usize,
    /// Sequences per phase-two step.
    pub phase2_batch: usize,
    pub seq_len: usize,
    pub cell: CellKind,
    pub channels: usize,
    pub stacks: usize,
    pub seed: u64,
    /// Total optimizer steps over both phases.
    pub steps: u64,
    /// Last step of phase one is `phase1_steps - 1` unless the plateau
    /// detector fires earlier.
    pub phase1_steps: u64,
    /// Window of the plateau detector in steps; 0 disables it.
    pub plateau_window: usize,
    /// Relative improvement between consecutive windows below which phase
    /// one is considered converged.
    pub plateau_tol: f64,
    /// Standard deviation of the target Gaussians in pixels.
    pub sigma: f64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 2.5e-4,
            decay_factor: 0.96,
            decay_every: 20_000,
            rho: 0.9,
            eps_opt: 1e-8,
            phase1_batch: 60,
            phase2_batch: 16,
            seq_len: 4,
            cell: CellKind::CoordConvGru,
            channels: 16,
            stacks: STACKS,
            seed: 0,
            steps: 5000,
            phase1_steps: 2500,
            plateau_window: 0,
            plateau_tol: 0.01,
            sigma: 1.0,
            checkpoint_every: 1000,
            data: None,
            checkpoint: None,
        }
    }
}

fn kv<T>(r: rhg_synth::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Config(e.to_string()))
}

impl TrainConfig {
    pub fn from_kv(kv_: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cell = match kv_.raw("cell") {
            None => d.cell,
            Some(s) => s.parse().map_err(|e: rhg_core::Error| Error::Config(e.to_string()))?,
        };
        let cfg = Self {
            base_lr: kv(kv_.get_or("base_lr", d.base_lr))?,
            decay_factor: kv(kv_.get_or("decay_factor", d.decay_factor))?,
            decay_every: kv(kv_.get_or("decay_every", d.decay_every))?,
            rho: kv(kv_.get_or("rho", d.rho))?,
            eps_opt: kv(kv_.get_or("eps_opt", d.eps_opt))?,
            phase1_batch: kv(kv_.get_or("phase1_batch", d.phase1_batch))?,
            phase2_batch: kv(kv_.get_or("phase2_batch", d.phase2_batch))?,
            seq_len: kv(kv_.get_or("seq_len", d.seq_len))?,
            cell,
            channels: kv(kv_.get_or("channels", d.channels))?,
            stacks: kv(kv_.get_or("stacks", d.stacks))?,
            seed: kv(kv_.get_or("seed", d.seed))?,
            steps: kv(kv_.get_or("steps", d.steps))?,
            phase1_steps: kv(kv_.get_or("phase1_steps", d.phase1_steps))?,
            plateau_window: kv(kv_.get_or("plateau_window", d.plateau_window))?,
            plateau_tol: kv(kv_.get_or("plateau_tol", d.plateau_tol))?,
            sigma: kv(kv_.get_or("sigma", d.sigma))?,
            checkpoint_every: kv(kv_.get_or("checkpoint_every", d.checkpoint_every))?,
            data: kv(kv_.get::<PathBuf>("data"))?,
            checkpoint: kv(kv_.get::<PathBuf>("checkpoint"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv_ = kv(KeyValues::parse(text))?;
        let cfg = Self::from_kv(&kv_)?;
        kv(kv_.finish())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let counts = [
            ("decay_every", self.decay_every as usize),
            ("phase1_batch", self.phase1_batch),
            ("phase2_batch", self.phase2_batch),
            ("seq_len", self.seq_len),
            ("channels", self.channels),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{k} must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!("decay_factor must lie in (0, 1), got {}", self.decay_factor));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if !(self.eps_opt > 0.0) || !(self.sigma > 0.0) {
            return bad("eps_opt and sigma must be positive".into());
        }
        if !(self.plateau_tol >= 0.0) {
            return bad(format!("plateau_tol must be non-negative, got {}", self.plateau_tol));
        }
        if self.stacks != STACKS {
            return bad(format!("the network has exactly {STACKS} stacks, got stacks = {}", self.stacks));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let d = TrainConfig::default();
        d.validate().unwrap();
        assert_eq!(TrainConfig::parse("").unwrap(), d);
    }

    #[test]
    fn parses_every_key() {
        let text = "base_lr = 1e-3\ndecay_factor = 0.5\ndecay_every = 10\nrho = 0.8\neps_opt = 1e-6\n\
                    phase1_batch = 4\nphase2_batch = 2\nseq_len = 3\ncell = none\nchannels = 8\nstacks = 2\n\
                    seed = 9\nsteps = 100\nphase1_steps = 40\nplateau_window = 20\nplateau_tol = 0.05\n\
                    sigma = 1.5\ncheckpoint_every = 25\ndata = /tmp/d # comment\ncheckpoint = out.hgck\n";
        let c = TrainConfig::parse(text).unwrap();
        assert_eq!(c.cell, CellKind::None);
        assert_eq!(c.seed, 9);
        assert_eq!(c.data.as_deref(), Some(std::path::Path::new("/tmp/d")));
        assert_eq!(c.checkpoint_every, 25);
        assert_eq!(c.sigma, 1.5);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "decay_factor = 1.0",
            "decay_factor = 0",
            "phase2_batch = 0",
            "stacks = 3",
            "cell = lstm",
            "steps = -1",
            "typo = 1",
            "rho = 1",
        ] {
            assert!(matches!(TrainConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
