//! Central finite-difference gradient checking.
//!
//! The oracle only ever re-runs forward evaluations, so it stays independent
//! of the backward implementation it is used to verify. Checks run at `f64`;
//! the step `h = 1e-5` leaves ample headroom against the 1e-3 tolerance.

use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub components: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients of `build` against central finite differences.
///
/// `build` receives one differentiable var per input tensor and must return a
/// scalar loss node. It is re-invoked on a fresh tape for every perturbed
/// component, so it must be a pure function of its inputs.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> VarId,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<VarId> = tensors.iter().map(|t| tape.var(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(tape.shape(loss), &[1], "gradcheck: loss must be scalar");
        assert!(
            tape.numeric_error().is_none(),
            "gradcheck: non-finite forward value"
        );
        tape.value(loss).item()
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<VarId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).expect("gradcheck: backward failed");

    let mut max_rel_err: f64 = 0.0;
    let mut components = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[ti], input.shape());
        for ci in 0..input.len() {
            let orig = input.data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let plus = eval(&work);
            work[ti].data_mut()[ci] = orig - h;
            let minus = eval(&work);
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[ci];
            let denom = a.abs().max(numeric.abs());
            let err = if denom < 1e-6 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / denom
            };
            if err > max_rel_err {
                max_rel_err = err;
            }
            components += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        components,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradcheck_passes() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5]);
        let report = check_gradients(&[x], DEFAULT_STEP, |tape, vars| {
            let sq = tape.square(vars[0]);
            tape.sum_all(sq)
        });
        assert!(report.passes(1e-6), "rel err {}", report.max_rel_err);
    }

    #[test]
    fn detects_wrong_gradient() {
        // exp scaled in forward only: analytic grad of sum(2*exp(x)) vs
        // numeric of sum(exp(x)) must disagree.
        let x = Tensor::vector(vec![0.1, 0.4]);
        let analytic_of_double = {
            let mut tape = Tape::new();
            let v = tape.var(x.clone());
            let e = tape.exp(v);
            let e2 = tape.scale(e, 2.0);
            let loss = tape.sum_all(e2);
            let g = tape.backward(loss).unwrap();
            g.get(v).unwrap().data()[0]
        };
        let report = check_gradients(&[x], DEFAULT_STEP, |tape, vars| {
            let e = tape.exp(vars[0]);
            tape.sum_all(e)
        });
        // sanity: the two really are different quantities
        assert!(analytic_of_double > 2.0 * report.max_rel_err);
        assert!(report.passes(1e-6));
    }
}
