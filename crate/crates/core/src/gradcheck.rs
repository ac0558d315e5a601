//! Finite-difference verification of taped gradients.
//!
//! The checker rebuilds a scalar-valued computation from scratch for every
//! perturbed input element and compares central differences against the
//! gradients produced by [`Tape::backward`]. It is used by the unit tests of
//! every differentiable op and by the integration suite's gradient-integrity
//! gate.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};

/// Relative error with an absolute floor: `|a − b| / max(1, |a|, |b|)`.
///
/// The floor keeps near-zero gradient pairs from blowing up the ratio while
/// still catching sign flips and scale errors.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Central-difference gradient of `f` at `x`, one element at a time.
pub fn numeric_gradient<F>(x: &[f64], h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        probe[i] = orig + h;
        let fp = f(&probe)?;
        probe[i] = orig - h;
        let fm = f(&probe)?;
        probe[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// One differentiable input to a checked computation.
pub struct CheckInput {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl CheckInput {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        CheckInput { rows, cols, values }
    }
}

/// Compares taped gradients against central differences for a computation
/// built by `build` over the given inputs. Returns the worst relative error
/// across every element of every input.
///
/// `build` receives a fresh tape plus one node per input (in order) and must
/// return a scalar loss node. It is re-invoked for every perturbation, so it
/// must be deterministic given the input values.
pub fn max_gradient_error<F>(inputs: &[CheckInput], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let run = |vals: &[Vec<f64>]| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .zip(vals)
            .map(|(inp, v)| tape.param(inp.rows, inp.cols, v.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        let value = tape.scalar(loss)?;
        tape.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.values(id).len()])
            })
            .collect();
        Ok((value, Some(grads)))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.clone()).collect();
    let (_, grads) = run(&base)?;
    let grads = grads.expect("gradients requested");

    let mut worst = 0.0f64;
    for (which, inp) in inputs.iter().enumerate() {
        for e in 0..inp.values.len() {
            let mut probe = base.clone();
            probe[which][e] = base[which][e] + h;
            let (fp, _) = run(&probe)?;
            probe[which][e] = base[which][e] - h;
            let (fm, _) = run(&probe)?;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(grads[which][e], numeric);
            if !err.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient check: non-finite comparison at input {which} element {e}"
                )));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
