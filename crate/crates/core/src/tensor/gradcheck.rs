//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator so gradients that are
    /// zero up to rounding compare on an absolute scale.
    pub floor: f64,
    /// Backward rule to sabotage on the analytic side.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst disagreement.
    pub worst_at: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences for every element of every input.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F, cfg: &GradCheckConfig) -> Result<GradCheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = match cfg.fault {
        Some(kind) => Tape::with_fault(kind),
        None => Tape::new(),
    };
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            tape.leaf(t)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.item(loss))
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst_at = None;
    let mut checked = 0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + cfg.step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - cfg.step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let err = relative_error(analytic[i][j], numeric, cfg.floor);
            if err > max_rel_error || err.is_nan() {
                max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                worst_at = Some((i, j));
            }
            checked += 1;
        }
    }
    Ok(GradCheckResult {
        name: name.to_string(),
        max_rel_error,
        worst_at,
        checked,
        passed: max_rel_error <= cfg.tolerance,
    })
}

/// Reduces `y` to a scalar through fixed pseudo-random weights, so that every
/// output element influences the loss differently.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..super::numel(&shape))
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..super::numel(shape)).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and buffer agree")
}
