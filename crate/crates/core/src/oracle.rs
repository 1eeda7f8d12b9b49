//! Central finite-difference gradient checking.
//!
//! Every differentiable op in this crate is validated against this checker:
//! a scalar probe loss is formed as a fixed random weighting of the op
//! output, the tape gradient is compared element-by-element with central
//! differences at fp64. The checker never calls into an op's backward path
//! itself; it only re-runs forwards.

use crate::rng::Rng;
use crate::tensor::{Result, Tape, TensorId};

/// One leaf input to a gradient check: shape plus initial values.
#[derive(Clone, Debug)]
pub struct CheckInput {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl CheckInput {
    pub fn random(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Self {
        let numel = shape.iter().product();
        let mut data = vec![0.0; numel];
        rng.fill_uniform(&mut data, lo, hi);
        CheckInput { shape: shape.to_vec(), data }
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with a floor so that near-zero gradient pairs compare
/// absolutely instead of blowing up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-3, f64::max(a.abs(), b.abs()))
}

/// Compare tape gradients of `build` against central finite differences.
///
/// `build` must construct the graph from the supplied leaves and return a
/// scalar loss. It is re-invoked on a fresh tape for every probe, so it
/// must be a pure function of the leaf values.
pub fn check_gradients(
    inputs: &[CheckInput],
    step: f64,
    build: &mut dyn FnMut(&mut Tape, &[TensorId]) -> Result<TensorId>,
) -> Result<GradReport> {
    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|inp| tape.leaf(inp.data.clone(), inp.shape.clone(), true))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.numel(id)]))
        .collect();

    let eval = |data: &[Vec<f64>], build: &mut dyn FnMut(&mut Tape, &[TensorId]) -> Result<TensorId>| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = data
            .iter()
            .zip(inputs.iter())
            .map(|(d, inp)| t.leaf(d.clone(), inp.shape.clone(), false))
            .collect::<Result<_>>()?;
        let loss = build(&mut t, &ids)?;
        Ok(t.data(loss)[0])
    };

    let mut report = GradReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.clone()).collect();
    for (k, inp) in inputs.iter().enumerate() {
        for i in 0..inp.data.len() {
            let mut plus = base.clone();
            plus[k][i] += step;
            let mut minus = base.clone();
            minus[k][i] -= step;
            let numeric = (eval(&plus, build)? - eval(&minus, build)?) / (2.0 * step);
            let a = analytic[k][i];
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Scalar probe: sum of the output weighted by fixed random coefficients,
/// so that sign errors cannot cancel the way a plain sum would allow.
pub fn weighted_probe(tape: &mut Tape, out: TensorId, rng: &mut Rng) -> Result<TensorId> {
    let n = tape.numel(out);
    let mut coeffs = vec![0.0; n];
    rng.fill_uniform(&mut coeffs, -1.0, 1.0);
    let shape = tape.shape(out).to_vec();
    let c = tape.constant(coeffs, shape)?;
    let prod = tape.mul(out, c)?;
    Ok(tape.sum_all(prod))
}
