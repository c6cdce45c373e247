//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Number of coordinates sampled across all checked inputs.
    pub samples: usize,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is zero are compared on an absolute scale.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 20,
            scale_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares autodiff gradients of the scalar built by `f` against central
/// differences, for randomly sampled coordinates of the inputs in `checked`.
/// All inputs are leaves; only those listed in `checked` are perturbed.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    checked: &[usize],
    config: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone(), checked.contains(&i)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut coords = Vec::new();
    for &i in checked {
        coords.extend((0..inputs[i].len()).map(|j| (i, j)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let picked: Vec<usize> = if coords.len() <= config.samples {
        (0..coords.len()).collect()
    } else {
        let mut p = sample(&mut rng, coords.len(), config.samples).into_vec();
        p.sort_unstable();
        p
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = f(&mut t, &vs)?;
        t.value(l).item()
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for k in picked {
        let (i, j) = coords[k];
        let analytic = tape.grad(vars[i]).map_or(0.0, |g| g.data()[j]);
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + config.step;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - config.step;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * config.step);
        report.checks.push(CoordinateCheck {
            input: i,
            index: j,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric, config.scale_floor),
        });
    }
    Ok(report)
}
