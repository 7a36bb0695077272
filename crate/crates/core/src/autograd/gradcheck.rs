//! Central-difference gradient checking.

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn eval_scalar<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = points
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Max relative error between the tape gradient of `f` and central
/// differences, over every coordinate of every input.
///
/// The error of one coordinate is `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-8..=1e-3).contains(&step) {
        return Err(Error::InvalidArgument(format!("grad_check step {step:e} outside [1e-8, 1e-3]")));
    }

    let mut tape = Tape::new();
    let vars = points
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item()?;
    let grads = tape.backward(out)?;

    if eval_scalar(&f, points)?.to_bits() != f0.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut worst: f64 = 0.0;
    for (which, p) in points.iter().enumerate() {
        let analytic = grads.wrt(vars[which]);
        for i in 0..p.len() {
            let mut shifted = points.to_vec();
            let mut data = p.to_vec();
            data[i] = p.data()[i] + step;
            shifted[which] = Tensor::new(p.shape().to_vec(), data.clone())?;
            let up = eval_scalar(&f, &shifted)?;
            data[i] = p.data()[i] - step;
            shifted[which] = Tensor::new(p.shape().to_vec(), data)?;
            let down = eval_scalar(&f, &shifted)?;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(point), step)
}
