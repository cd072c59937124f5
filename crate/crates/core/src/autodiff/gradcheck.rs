//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Coordinates are all checked up to this count; above it a seeded sample is
/// drawn instead.
pub const FULL_CHECK_LIMIT: usize = 50_000;
pub const SAMPLE_SIZE: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::numeric("objective is not finite"));
    }
    Ok(v)
}

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` at `params` against
/// `(f(θ + εe) − f(θ − εe)) / 2ε`.
///
/// `f` rebuilds the objective on a fresh tape from leaf handles in the same
/// order as `params`. Every coordinate is checked when there are at most
/// [`FULL_CHECK_LIMIT`]; otherwise [`SAMPLE_SIZE`] coordinates drawn with
/// `seed`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::domain("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let total: usize = params.iter().map(Tensor::len).sum();
    let coords: Vec<usize> = if total <= FULL_CHECK_LIMIT {
        (0..total).collect()
    } else {
        let mut v = sample(&mut seeded(seed), total, SAMPLE_SIZE).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: coords.len(),
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for flat in coords {
        let (mut p, mut k) = (0, flat);
        while k >= params[p].len() {
            k -= params[p].len();
            p += 1;
        }
        let orig = params[p].data()[k];
        work[p].data_mut()[k] = orig + eps;
        let up = eval(&f, &work)?;
        work[p].data_mut()[k] = orig - eps;
        let down = eval(&f, &work)?;
        work[p].data_mut()[k] = orig;
        let fd = (up - down) / (2.0 * eps);
        let err = rel_error(analytic[p].data()[k], fd);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (p, k);
        }
    }
    Ok(report)
}
