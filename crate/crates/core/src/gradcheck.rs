//! Central finite-difference checking for tape gradients.
//!
//! The probe rebuilds the computation from scratch for every perturbed entry,
//! so it is independent of the backward pass it validates. Intended for tests;
//! kept in the library so the acceptance suite can drive it.

use crate::tape::{Tape, Value};

/// Settings for a finite-difference run.
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Relative error allowed per entry.
    pub tol: f64,
    /// Denominator floor so near-zero gradients compare absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

impl GradCheck {
    pub fn tolerance(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

/// Compare analytic gradients of a scalar-valued build against central finite
/// differences over every entry of every input. Returns the worst relative
/// error seen; panics if it exceeds `cfg.tol`.
///
/// `build` must construct the same computation whenever it is called with the
/// same input data.
pub fn check_gradients<F>(cfg: &GradCheck, inputs: &[(usize, usize, Vec<f64>)], build: F) -> f64
where
    F: Fn(&Tape, &[Value]) -> Value,
{
    let eval = |datasets: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        let tape = Tape::new();
        let handles: Vec<Value> = inputs
            .iter()
            .zip(datasets)
            .map(|((r, c, _), d)| tape.leaf(*r, *c, d.clone()))
            .collect();
        let out = build(&tape, &handles);
        assert_eq!(out.len(), 1, "gradient check requires a scalar output");
        let loss = tape.scalar(out);
        tape.backward(out);
        let grads = handles.iter().map(|h| tape.grad(*h)).collect();
        (loss, grads)
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, _, d)| d.clone()).collect();
    let (_, analytic) = eval(&base);

    let mut worst = 0.0f64;
    for (i, data) in base.iter().enumerate() {
        for j in 0..data.len() {
            let mut plus = base.clone();
            plus[i][j] += cfg.step;
            let mut minus = base.clone();
            minus[i][j] -= cfg.step;
            let (lp, _) = eval(&plus);
            let (lm, _) = eval(&minus);
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let denom = analytic[i][j].abs().max(numeric.abs()).max(cfg.floor);
            let rel = (analytic[i][j] - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
            assert!(
                rel <= cfg.tol,
                "gradient mismatch at input {i} entry {j}: analytic {} vs numeric {} (rel {rel})",
                analytic[i][j],
                numeric
            );
        }
    }
    worst
}
