//! Concrete vector fields.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::init_fan_in;
use crate::ode::OdeDynamics;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, a: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(a),
            Activation::Softplus => tape.softplus(a),
            Activation::Tanh => tape.tanh(a),
        }
    }

    /// Elementwise derivative, itself differentiable where that makes sense
    /// (the relu derivative is a step with zero gradient).
    pub fn derivative(self, tape: &mut Tape, a: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.heaviside(a),
            Activation::Softplus => tape.sigmoid(a),
            Activation::Tanh => {
                let th = tape.tanh(a)?;
                let sq = tape.mul(th, th)?;
                let n = tape.neg(sq)?;
                tape.add_scalar(n, 1.0)
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::Config(format!("unknown activation {s:?}"))),
        }
    }
}

/// `f(z, t, h) = W2 act(W1 [z, t] + Wh h)` applied to the last axis of `z`.
///
/// Parameters, in order: `w1: [m, d+1]` (last column multiplies `t`),
/// `w2: [d, m]`, and `wh: [m, ctx_dim]` when a context is used.
///
/// With a context `h: [C, ctx_dim]`, `z` must have `C` leading slices; every
/// point in slice `c` sees `h[c]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpDynamics {
    pub dim: usize,
    pub hidden: usize,
    pub ctx_dim: Option<usize>,
    pub act: Activation,
}

impl MlpDynamics {
    pub fn new(dim: usize, hidden: usize, ctx_dim: Option<usize>, act: Activation) -> Self {
        Self {
            dim,
            hidden,
            ctx_dim,
            act,
        }
    }

    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let mut v = vec![("w1", vec![self.hidden, self.dim + 1]), ("w2", vec![self.dim, self.hidden])];
        if let Some(c) = self.ctx_dim {
            v.push(("wh", vec![self.hidden, c]));
        }
        v
    }

    /// Fan-in uniform initialization.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        self.param_shapes()
            .into_iter()
            .map(|(_, s)| {
                let fan_in = s[1];
                init_fan_in(s, fan_in, rng)
            })
            .collect()
    }

    fn check(&self, tape: &Tape, z: Var, params: &[Var]) -> Result<()> {
        let want = 2 + usize::from(self.ctx_dim.is_some());
        if params.len() != want {
            return Err(Error::InvalidArgument(format!("MlpDynamics needs {want} params, got {}", params.len())));
        }
        for ((name, shape), &p) in self.param_shapes().iter().zip(params) {
            if tape.shape(p) != shape.as_slice() {
                return Err(shape_err("MlpDynamics", format!("{name}: {:?}, expected {:?}", tape.shape(p), shape)));
            }
        }
        if tape.shape(z).last() != Some(&self.dim) {
            return Err(shape_err("MlpDynamics", format!("state {:?}, dim {}", tape.shape(z), self.dim)));
        }
        Ok(())
    }

    /// Pre-activation `W1 [z, t] + Wh h`, shape `[.., m]`.
    pub fn pre_activation(&self, tape: &mut Tape, z: Var, t: f64, ctx: Option<Var>, params: &[Var]) -> Result<Var> {
        self.check(tape, z, params)?;
        let d = self.dim;
        let w1z = tape.slice(params[0], 0, d)?;
        let w1t = tape.slice(params[0], d, d + 1)?;
        let w1t = tape.reshape(w1t, [self.hidden])?;
        let a = tape.matmul_t(z, w1z)?;
        let tt = tape.scale(w1t, t)?;
        let mut a = tape.add(a, tt)?;
        match (ctx, self.ctx_dim) {
            (Some(h), Some(_)) => {
                let zs = tape.shape(z).to_vec();
                let c = tape.shape(h)[0];
                let points = zs.iter().product::<usize>() / d;
                if c == 0 || zs.len() < 2 || zs[0] != c || points % c != 0 {
                    return Err(shape_err("MlpDynamics", format!("state {zs:?} vs context {:?}", tape.shape(h))));
                }
                let hw = tape.matmul_t(h, params[2])?;
                let tiled = tape.tile_rows(hw, points / c)?;
                let mut shape = zs[..zs.len() - 1].to_vec();
                shape.push(self.hidden);
                let tiled = tape.reshape(tiled, shape)?;
                a = tape.add(a, tiled)?;
            }
            (None, None) => {}
            (None, Some(_)) => return Err(Error::InvalidArgument("context dynamics called without a context".into())),
            (Some(_), None) => return Err(Error::InvalidArgument("context given to context-free dynamics".into())),
        }
        Ok(a)
    }

    /// `diag(W1z W2)`, shape `[m]`.
    pub fn jacobian_diag_weights(&self, tape: &mut Tape, params: &[Var]) -> Result<Var> {
        let w1z = tape.slice(params[0], 0, self.dim)?;
        let w2t = tape.transpose(params[1])?;
        let p = tape.mul(w1z, w2t)?;
        tape.sum_last(p)
    }
}

impl OdeDynamics for MlpDynamics {
    fn eval_on_tape(&self, tape: &mut Tape, z: Var, t: f64, ctx: Option<Var>, params: &[Var]) -> Result<Var> {
        let a = self.pre_activation(tape, z, t, ctx, params)?;
        let s = self.act.apply(tape, a)?;
        tape.matmul_t(s, params[1])
    }
}

/// `f(z) = A z` on the last axis; one parameter `A: [d, d]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LinearDynamics;

impl OdeDynamics for LinearDynamics {
    fn eval_on_tape(&self, tape: &mut Tape, z: Var, _t: f64, _ctx: Option<Var>, params: &[Var]) -> Result<Var> {
        let a = params.first().ok_or_else(|| Error::InvalidArgument("LinearDynamics needs A".into()))?;
        tape.matmul_t(z, *a)
    }
}

/// `f ≡ 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDynamics;

impl OdeDynamics for ZeroDynamics {
    fn eval_on_tape(&self, tape: &mut Tape, z: Var, _t: f64, _ctx: Option<Var>, _params: &[Var]) -> Result<Var> {
        tape.scale(z, 0.0)
    }
}
