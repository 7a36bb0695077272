//! Fixed-step solves recorded on the tape, so gradients come from plain
//! backpropagation through every stage. Memory grows with the step count;
//! this is the reference the adjoint is checked against.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ode::{Method, OdeDynamics};

fn lin(tape: &mut Tape, z: Var, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc = z;
    for &(c, k) in terms {
        let s = tape.scale(k, c)?;
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

#[allow(clippy::too_many_arguments)]
pub fn solve_on_tape(
    tape: &mut Tape,
    f: &dyn OdeDynamics,
    z0: Var,
    t0: f64,
    t1: f64,
    ctx: Option<Var>,
    params: &[Var],
    method: Method,
    steps: usize,
) -> Result<Var> {
    if steps == 0 {
        return Err(Error::Config("solver steps must be >= 1".into()));
    }
    if t0 == t1 {
        return Ok(z0);
    }
    let h = (t1 - t0) / steps as f64;
    let mut z = z0;
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        z = match method {
            Method::Euler => {
                let k1 = f.eval_on_tape(tape, z, t, ctx, params)?;
                lin(tape, z, &[(h, k1)])?
            }
            Method::Midpoint => {
                let k1 = f.eval_on_tape(tape, z, t, ctx, params)?;
                let zm = lin(tape, z, &[(0.5 * h, k1)])?;
                let k2 = f.eval_on_tape(tape, zm, t + 0.5 * h, ctx, params)?;
                lin(tape, z, &[(h, k2)])?
            }
            Method::Rk4 => {
                let k1 = f.eval_on_tape(tape, z, t, ctx, params)?;
                let z2 = lin(tape, z, &[(0.5 * h, k1)])?;
                let k2 = f.eval_on_tape(tape, z2, t + 0.5 * h, ctx, params)?;
                let z3 = lin(tape, z, &[(0.5 * h, k2)])?;
                let k3 = f.eval_on_tape(tape, z3, t + 0.5 * h, ctx, params)?;
                let z4 = lin(tape, z, &[(h, k3)])?;
                let k4 = f.eval_on_tape(tape, z4, t + h, ctx, params)?;
                lin(tape, z, &[(h / 6.0, k1), (h / 3.0, k2), (h / 3.0, k3), (h / 6.0, k4)])?
            }
            Method::Dopri5 => {
                return Err(Error::Unsupported("adaptive solves cannot be recorded on the tape".into()))
            }
        };
        if !tape.value(z).is_finite() {
            return Err(Error::NonFinite(format!("ODE state at t={}", t + h)));
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::ode::{ode_solve_fixed, LinearDynamics, SolverConfig, System};

    #[test]
    fn matches_value_solver() {
        let a = Tensor::from_rows(&[vec![0.1, -0.3], vec![0.5, 0.2]]).unwrap();
        let z0 = Tensor::new([3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        for m in [Method::Euler, Method::Midpoint, Method::Rk4] {
            let mut tape = Tape::new();
            let av = tape.constant(a.clone()).unwrap();
            let zv = tape.constant(z0.clone()).unwrap();
            let z1 = solve_on_tape(&mut tape, &LinearDynamics, zv, 0.0, 1.3, None, &[av], m, 6).unwrap();
            let params = [a.clone()];
            let sol = ode_solve_fixed(&System::new(&LinearDynamics, &params), &z0, 0.0, 1.3, &SolverConfig::fixed(m, 6)).unwrap();
            assert!(tape.value(z1).max_abs_diff(&sol.z1) < 1e-14, "{m:?}");
        }
    }

    #[test]
    fn scalar_growth_sensitivity() {
        // z' = θ z, z(0) = 1: dz(1)/dθ = e at θ = 1.
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::new([1, 1], vec![1.0]).unwrap()).unwrap();
        let z0 = tape.constant(Tensor::new([1, 1], vec![1.0]).unwrap()).unwrap();
        let z1 = solve_on_tape(&mut tape, &LinearDynamics, z0, 0.0, 1.0, None, &[theta], Method::Rk4, 200).unwrap();
        let l = tape.sum(z1).unwrap();
        let g = tape.backward(l).unwrap().wrt(theta);
        assert!((g.data()[0] - std::f64::consts::E).abs() < 1e-8);
    }
}
