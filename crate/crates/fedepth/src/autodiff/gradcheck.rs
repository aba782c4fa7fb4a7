//! Central finite-difference verification of recorded gradients.

use ndarray::ArrayD;

use super::{Tape, Var};
use crate::real::Real;

/// Central-difference gradient of a scalar function of one array.
pub fn numeric_gradient<F: Real>(
    x0: &ArrayD<F>,
    step: F,
    mut eval: impl FnMut(&ArrayD<F>) -> F,
) -> ArrayD<F> {
    let mut grad = ArrayD::zeros(x0.raw_dim());
    let mut x = x0.clone();
    let indices: Vec<_> = x0.indexed_iter().map(|(ix, _)| ix).collect();
    for ix in indices {
        let base = x[&ix];
        x[&ix] = base + step;
        let plus = eval(&x);
        x[&ix] = base - step;
        let minus = eval(&x);
        x[&ix] = base;
        grad[&ix] = (plus - minus) / (F::c(2.0) * step);
    }
    grad
}

/// Largest elementwise relative error `|a-b| / max(|a|, |b|, floor)`.
pub fn max_relative_error<F: Real>(a: &ArrayD<F>, b: &ArrayD<F>, floor: F) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shape mismatch");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let denom = x.abs().max(y.abs()).max(floor);
            ((x - y).abs() / denom).f64()
        })
        .fold(0.0, f64::max)
}

/// Builds the same scalar expression on a fresh tape for both the recorded
/// and the finite-difference gradient of `x0`, then asserts agreement.
pub fn check_scalar_fn<F: Real>(
    x0: &ArrayD<F>,
    step: F,
    tol: f64,
    build: impl for<'t> Fn(&'t Tape<F>, Var<'t, F>) -> Var<'t, F>,
) {
    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let y = build(&tape, x);
    let recorded = tape.backward(y).wrt(x);

    let numeric = numeric_gradient(x0, step, |xs| {
        let t = Tape::new();
        let v = t.leaf(xs.clone());
        build(&t, v).scalar_value()
    });

    let err = max_relative_error(&recorded, &numeric, F::c(1e-6));
    assert!(
        err < tol,
        "gradient mismatch: max relative error {err:.3e} exceeds {tol:.1e}"
    );
}
