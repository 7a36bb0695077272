//! ODE integration and adjoint sensitivities.
//!
//! Dynamics are described by [`OdeDynamics`], which only knows how to build
//! `f(z, t, ctx; θ)` on a tape. Parameter values are supplied separately so
//! the same description serves value-level solves, direct backpropagation
//! through a fixed-step solver ([`solve_on_tape`]) and the adjoint method
//! ([`adjoint_backward`], [`odeint_adjoint`]).

mod adjoint;
mod dynamics;
mod solvers;
mod tape_solve;

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

pub use adjoint::{adjoint_backward, odeint_adjoint, AdjointGrads};
pub use dynamics::{Activation, LinearDynamics, MlpDynamics, ZeroDynamics};
pub use solvers::{integrate, integrate_adaptive, integrate_fixed};
pub use tape_solve::solve_on_tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
    Dopri5,
}

impl Method {
    /// Order of accuracy of the method.
    pub fn order(self) -> u32 {
        match self {
            Method::Euler => 1,
            Method::Midpoint => 2,
            Method::Rk4 => 4,
            Method::Dopri5 => 5,
        }
    }

    pub fn is_adaptive(self) -> bool {
        self == Method::Dopri5
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "midpoint" => Ok(Method::Midpoint),
            "rk4" => Ok(Method::Rk4),
            "dopri5" => Ok(Method::Dopri5),
            _ => Err(Error::Config(format!("unknown solver method {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    /// Number of equal steps for fixed-step methods.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_evals: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5,
            steps: 10,
            rtol: 1e-5,
            atol: 1e-7,
            max_evals: 100_000,
        }
    }
}

impl SolverConfig {
    pub fn fixed(method: Method, steps: usize) -> Self {
        Self {
            method,
            steps,
            ..Self::default()
        }
    }

    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("solver steps must be >= 1".into()));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config(format!("tolerances must be positive (rtol {}, atol {})", self.rtol, self.atol)));
        }
        if self.max_evals == 0 {
            return Err(Error::Config("max_evals must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub evals: usize,
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Clone, Debug)]
pub struct OdeSolution {
    pub z1: Tensor,
    pub stats: SolveStats,
}

/// A vector field `f(z, t, ctx; θ)`.
///
/// `eval_on_tape` must return a tensor with the shape of `z` and be
/// deterministic in its inputs.
pub trait OdeDynamics {
    fn eval_on_tape(&self, tape: &mut Tape, z: Var, t: f64, ctx: Option<Var>, params: &[Var]) -> Result<Var>;

    /// Value-only evaluation; the default records on a throwaway tape.
    fn eval(&self, z: &Tensor, t: f64, ctx: Option<&Tensor>, params: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone())?;
        let cv = ctx.map(|c| tape.constant(c.clone())).transpose()?;
        let pv = params.iter().map(|p| tape.constant(p.clone())).collect::<Result<Vec<_>>>()?;
        let out = self.eval_on_tape(&mut tape, zv, t, cv, &pv)?;
        Ok(tape.value(out).clone())
    }
}

/// Dynamics bound to parameter values and an optional context.
#[derive(Clone, Copy)]
pub struct System<'a> {
    pub f: &'a dyn OdeDynamics,
    pub params: &'a [Tensor],
    pub ctx: Option<&'a Tensor>,
}

impl<'a> System<'a> {
    pub fn new(f: &'a dyn OdeDynamics, params: &'a [Tensor]) -> Self {
        Self { f, params, ctx: None }
    }

    pub fn with_ctx(mut self, ctx: Option<&'a Tensor>) -> Self {
        self.ctx = ctx;
        self
    }

    pub fn eval(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let out = self.f.eval(z, t, self.ctx, self.params)?;
        if out.shape() != z.shape() {
            return Err(shape_err(
                "OdeDynamics::eval",
                format!("state {:?} but derivative {:?}", z.shape(), out.shape()),
            ));
        }
        Ok(out)
    }

    pub(crate) fn flat_rhs(&self, shape: &'a [usize]) -> impl FnMut(f64, &[f64]) -> Result<Vec<f64>> + '_ {
        move |t, z| {
            let zt = Tensor::new(shape.to_vec(), z.to_vec())?;
            Ok(self.eval(&zt, t)?.to_vec())
        }
    }
}

/// Fixed-step solve (`euler`, `midpoint` or `rk4`).
pub fn ode_solve_fixed(sys: &System, z0: &Tensor, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<OdeSolution> {
    if cfg.method.is_adaptive() {
        return Err(Error::InvalidArgument("ode_solve_fixed needs a fixed-step method".into()));
    }
    let (z, stats) = integrate_fixed(sys.flat_rhs(z0.shape()), z0.data(), t0, t1, cfg)?;
    Ok(OdeSolution {
        z1: Tensor::new(z0.shape().to_vec(), z)?,
        stats,
    })
}

/// Adaptive Dormand-Prince solve.
pub fn ode_solve_adaptive(sys: &System, z0: &Tensor, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<OdeSolution> {
    if !cfg.method.is_adaptive() {
        return Err(Error::InvalidArgument("ode_solve_adaptive needs dopri5".into()));
    }
    let (z, stats) = integrate_adaptive(sys.flat_rhs(z0.shape()), z0.data(), t0, t1, cfg)?;
    Ok(OdeSolution {
        z1: Tensor::new(z0.shape().to_vec(), z)?,
        stats,
    })
}

/// Solves with whichever method `cfg` names.
pub fn ode_solve(sys: &System, z0: &Tensor, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<OdeSolution> {
    if cfg.method.is_adaptive() {
        ode_solve_adaptive(sys, z0, t0, t1, cfg)
    } else {
        ode_solve_fixed(sys, z0, t0, t1, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Euler, Method::Midpoint, Method::Rk4, Method::Dopri5] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("rk45".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::fixed(Method::Rk4, 0).validate().is_err());
        assert!(SolverConfig::adaptive(0.0, 1e-6).validate().is_err());
        assert!(SolverConfig::default().validate().is_ok());
    }

    #[test]
    fn linear_rotation_with_tensors() {
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let params = [a];
        let sys = System::new(&LinearDynamics, &params);
        let z0 = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let sol = ode_solve(&sys, &z0, 0.0, 2.0 * std::f64::consts::PI, &SolverConfig::adaptive(1e-8, 1e-10)).unwrap();
        assert!(sol.z1.max_abs_diff(&z0) < 1e-5);
        assert!(sol.stats.evals > 0);
    }
}
