//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-4;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// (input index, flat coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn eval_scalar<F, M>(make_tape: &M, f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    M: Fn() -> Tape,
{
    let mut tape = make_tape();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), core::slice::from_ref(x), step, tol)
}

/// Checks the gradient of a scalar function with respect to every coordinate
/// of every input. `f` must be deterministic; a function whose output differs
/// between two identical evaluations is rejected with a protocol error.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_on(Tape::new, f, inputs, step, tol)
}

/// Like [`grad_check_many`], with every tape created by `make_tape`.
pub fn grad_check_on<M, F>(
    make_tape: M,
    f: F,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    M: Fn() -> Tape,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) || !(tol > 0.0) {
        return Err(Error::config("grad_check step and tolerance must be positive"));
    }
    let first = eval_scalar(&make_tape, &f, inputs)?;
    let second = eval_scalar(&make_tape, &f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Protocol(alloc::format!(
            "function is not deterministic ({first} vs {second}); disable stochastic layers"
        )));
    }

    let mut tape = make_tape();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        coordinates: 0,
        max_rel_error: 0.0,
        worst: None,
        tol,
        passed: true,
    };
    let mut probe = inputs.to_vec();
    for (input_idx, grad) in analytic.iter().enumerate() {
        for coord in 0..grad.len() {
            let base = probe[input_idx].data()[coord];
            probe[input_idx].data_mut()[coord] = base + step;
            let plus = eval_scalar(&make_tape, &f, &probe)?;
            probe[input_idx].data_mut()[coord] = base - step;
            let minus = eval_scalar(&make_tape, &f, &probe)?;
            probe[input_idx].data_mut()[coord] = base;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[coord];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((input_idx, coord, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
