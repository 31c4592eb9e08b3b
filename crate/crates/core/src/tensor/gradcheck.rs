//! Central finite-difference gradient checking. The numeric side only ever
//! re-runs forward passes, so it is independent of the backward
//! implementation it is used to verify.

use crate::error::Result;
use crate::tensor::{Array, Tape, Var};

/// Default step for central differences (double precision).
pub const DEFAULT_H: f64 = 1e-5;

/// Relative error with an absolute floor so near-zero gradients compare on
/// an absolute scale instead of blowing up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Check the gradients of a scalar-valued graph against central finite
/// differences. `build` receives a fresh tape plus one differentiable leaf
/// per input array and must return the scalar loss. Returns the maximum
/// relative error over every input element.
pub fn check<F>(build: F, inputs: &[Array], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |arrays: &[Array]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.var(a.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data[0])
    };

    // Analytic gradients from one taped pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, a)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; a.numel()]))
        .collect();

    let mut work: Vec<Array> = inputs.to_vec();
    let mut max_err: f64 = 0.0;
    for (ai, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = work[ai].data[j];
            work[ai].data[j] = orig + h;
            let up = eval(&work)?;
            work[ai].data[j] = orig - h;
            let down = eval(&work)?;
            work[ai].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[ai][j], numeric));
        }
    }
    Ok(max_err)
}

/// Numeric gradient of an arbitrary closure at `x`, one central difference
/// per coordinate. Useful when the quantity under test is not tape-built.
pub fn numeric_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for j in 0..x.len() {
        let orig = work[j];
        work[j] = orig + h;
        let up = f(&work);
        work[j] = orig - h;
        let down = f(&work);
        work[j] = orig;
        out[j] = (up - down) / (2.0 * h);
    }
    out
}
