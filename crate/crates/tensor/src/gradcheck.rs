//! Central-difference gradient verification, always in f64.
//!
//! The comparison metric is relative:
//! `|analytic - numeric| / max(1e-7, |analytic| + |numeric|)`,
//! reported as the maximum over every coordinate of every checked input.
//! The floor keeps near-zero gradients from being judged on pure
//! floating-point noise: central differences of an O(1) loss carry ~1e-12
//! of cancellation error regardless of the true derivative.

use crate::{Result, Tape, Tensor, TensorError, TensorId};

/// Outcome of [`gradient_check`]; `max_rel_err` is the headline number,
/// the rest identifies the worst coordinate for debugging.
#[derive(Debug, Clone, Copy)]
pub struct CheckResult {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CheckResult {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }
}

fn eval_loss<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| {
            let mut c = t.clone();
            c.set_requires_grad(false);
            tape.leaf(c)
        })
        .collect();
    let loss = f(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::NonScalarLoss(tape.shape(loss).to_vec()));
    }
    Ok(tape.data(loss)[0])
}

/// Compare backpropagated gradients of `f` against central differences.
///
/// `f` maps the inserted inputs to a scalar loss. Inputs with
/// `requires_grad` set are perturbed coordinate-by-coordinate with step
/// `eps`; the others are treated as constants.
pub fn gradient_check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()))
        .collect();

    let mut result = CheckResult {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let grads = analytic[i]
            .as_ref()
            .expect("requires_grad input missing gradient after backward");
        for c in 0..input.numel() {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + eps;
            let plus = eval_loss(&work, &f)?;
            work[i].data_mut()[c] = orig - eps;
            let minus = eval_loss(&work, &f)?;
            work[i].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[c];
            let rel = (a - numeric).abs() / (1e-7_f64).max(a.abs() + numeric.abs());
            if rel > result.max_rel_err {
                result = CheckResult {
                    max_rel_err: rel,
                    worst_input: i,
                    worst_coord: c,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(result)
}
