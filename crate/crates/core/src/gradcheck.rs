//! Central finite-difference verification of tape gradients.

use rand::rngs::StdRng;
use rand::seq::index::sample;
use rand::SeedableRng;

use crate::tape::expect_scalar;
use crate::{Result, Tape, Tensor, Var};

/// Which elements of each input to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// At most `per_input` elements of each input, chosen with `seed`.
    Sample { per_input: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Gradients smaller than this are compared in absolute terms. Central
/// differences at eps 1e-5 on an O(1) loss carry roundoff of a few 1e-10, so
/// relative error is meaningless much below this magnitude.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    expect_scalar(tape.value(out))?;
    Ok(tape.value(out).item())
}

/// Max over probed elements of `|analytic - numeric| / max(|analytic|, |numeric|, MAGNITUDE_FLOOR)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(f, inputs, eps, Probe::All)?.max_rel_error)
}

pub fn grad_check_report<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    probe: Probe,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(crate::Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut rng = match probe {
        Probe::Sample { seed, .. } => Some(StdRng::seed_from_u64(seed)),
        Probe::All => None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let elems: Vec<usize> = match (probe, rng.as_mut()) {
            (Probe::Sample { per_input, .. }, Some(r)) if per_input < input.len() => {
                let mut v = sample(r, input.len(), per_input).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..input.len()).collect(),
        };
        for j in elems {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
