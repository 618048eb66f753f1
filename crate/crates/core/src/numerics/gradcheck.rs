//! Central finite-difference gradient checker.
//!
//! The numeric side evaluates only forward passes on fresh tapes, so it is
//! independent of every backward rule it checks.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest elementwise relative error over all inputs.
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub entries: usize,
}

/// Entries where both gradients fall below this magnitude are compared
/// absolutely.
const ABS_FLOOR: f64 = 1e-6;

/// Compares analytic input gradients of scalar `f` with central differences
/// of half-width `step`.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::detached();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::detached();
        let vs: Vec<Var> = values.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[which].len()]);
        for e in 0..inputs[which].len() {
            let base = inputs[which].data()[e];
            probe[which].data_mut()[e] = base + step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[e] = base - step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[e] = base;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[e];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < ABS_FLOOR {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / scale
            };
            worst = worst.max(err);
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        entries,
    })
}
