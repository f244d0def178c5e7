//! Central finite-difference gradient oracle.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Pass threshold used by every gradient suite.
pub const REL_ERR_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Largest element-wise relative error between two gradients.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function with respect to every element
/// of every input.
pub fn finite_difference<F>(inputs: &[Tensor], step: f64, mut eval: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Reduces `out` to a scalar through a fixed pseudo-random weighting so that
/// every output element influences the checked gradient differently.
pub fn random_projection(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(shape, weights)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Uniform random tensor in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Outcome of checking one function's gradients.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    /// Max relative error per input, in input order.
    pub per_input: Vec<f64>,
}

impl CheckOutcome {
    pub fn max(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max() < REL_ERR_TOL
    }
}

/// Compares tape gradients of `f` against central differences. `f` must map
/// the given leaves to a scalar; `fault` corrupts one backward rule.
pub fn check_fn<F>(inputs: &[Tensor], fault: Option<OpKind>, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_backward_fault(kind);
    }
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.get(v)).collect();

    let numeric = finite_difference(inputs, FD_STEP, |xs| {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &leaves)?;
        Ok(tape.value(loss).item())
    })?;
    Ok(CheckOutcome {
        per_input: analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| max_relative_error(a, n))
            .collect(),
    })
}
