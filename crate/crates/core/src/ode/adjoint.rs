//! Adjoint sensitivities.
//!
//! Gradients of a loss `L(z(t1))` are obtained by integrating the augmented
//! state `[z, a, g_θ, g_ctx]` from `t1` back to `t0`:
//!
//! ```text
//! dz/dt     =  f(z, t)
//! da/dt     = -aᵀ ∂f/∂z
//! dg_θ/dt   = -aᵀ ∂f/∂θ
//! dg_ctx/dt = -aᵀ ∂f/∂ctx
//! ```
//!
//! starting from `a(t1) = dL/dz(t1)` and zero accumulators. At `t0`,
//! `a = dL/dz0` and `g_θ = dL/dθ`. All products are tape VJPs.

use std::sync::Arc;

use crate::autograd::{CustomOp, Tape, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::ode::{integrate, OdeDynamics, SolveStats, SolverConfig, System};

#[derive(Clone, Debug)]
pub struct AdjointGrads {
    pub dz0: Tensor,
    pub dparams: Vec<Tensor>,
    pub dctx: Option<Tensor>,
    /// The state recovered at `t0` by the backward solve.
    pub z0: Tensor,
    pub stats: SolveStats,
}

fn split(flat: &[f64], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(Tensor::new(s.clone(), flat[off..off + n].to_vec())?);
        off += n;
    }
    Ok(out)
}

pub fn adjoint_backward(
    sys: &System,
    z1: &Tensor,
    t0: f64,
    t1: f64,
    dl_dz1: &Tensor,
    cfg: &SolverConfig,
) -> Result<AdjointGrads> {
    if dl_dz1.shape() != z1.shape() {
        return Err(shape_err("adjoint_backward", format!("dL/dz1 {:?} vs z1 {:?}", dl_dz1.shape(), z1.shape())));
    }
    let zshape = z1.shape().to_vec();
    let mut shapes = vec![zshape.clone(), zshape.clone()];
    shapes.extend(sys.params.iter().map(|p| p.shape().to_vec()));
    if let Some(c) = sys.ctx {
        shapes.push(c.shape().to_vec());
    }
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let mut s0 = Vec::with_capacity(total);
    s0.extend_from_slice(z1.data());
    s0.extend_from_slice(dl_dz1.data());
    s0.resize(total, 0.0);

    let np = sys.params.len();
    let rhs = |t: f64, s: &[f64]| -> Result<Vec<f64>> {
        let parts = split(s, &shapes[..2])?;
        let mut tape = Tape::new();
        let z = tape.param(parts[0].clone())?;
        let pv = sys.params.iter().map(|p| tape.param(p.clone())).collect::<Result<Vec<_>>>()?;
        let cv = sys.ctx.map(|c| tape.param(c.clone())).transpose()?;
        let out = sys.f.eval_on_tape(&mut tape, z, t, cv, &pv)?;
        if tape.shape(out) != zshape.as_slice() {
            return Err(shape_err("adjoint rhs", format!("derivative {:?} for state {:?}", tape.shape(out), zshape)));
        }
        let g = tape.vjp(out, &parts[1])?;
        let mut ds = Vec::with_capacity(s.len());
        ds.extend_from_slice(tape.value(out).data());
        ds.extend(g.wrt(z).data().iter().map(|v| -v));
        for &p in &pv {
            ds.extend(g.wrt(p).data().iter().map(|v| -v));
        }
        if let Some(c) = cv {
            ds.extend(g.wrt(c).data().iter().map(|v| -v));
        }
        Ok(ds)
    };
    let (s, stats) = integrate(rhs, &s0, t1, t0, cfg)?;
    let mut parts = split(&s, &shapes)?.into_iter();
    let z0 = parts.next().expect("z");
    let dz0 = parts.next().expect("a");
    let dparams: Vec<Tensor> = parts.by_ref().take(np).collect();
    let dctx = parts.next();
    Ok(AdjointGrads {
        dz0,
        dparams,
        dctx,
        z0,
        stats,
    })
}

struct AdjointOp {
    f: Arc<dyn OdeDynamics>,
    t0: f64,
    t1: f64,
    nparams: usize,
    cfg: SolverConfig,
}

impl CustomOp for AdjointOp {
    fn name(&self) -> &str {
        "odeint_adjoint"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let params: Vec<Tensor> = inputs[1..1 + self.nparams].iter().map(|&t| t.clone()).collect();
        let ctx = inputs.get(1 + self.nparams).copied();
        let sys = System::new(self.f.as_ref(), &params).with_ctx(ctx);
        let g = adjoint_backward(&sys, output, self.t0, self.t1, grad, &self.cfg)?;
        let mut out = Vec::with_capacity(inputs.len());
        out.push(Some(g.dz0));
        out.extend(g.dparams.into_iter().map(Some));
        if ctx.is_some() {
            out.push(g.dctx);
        }
        Ok(out)
    }
}

/// Solves `z(t1)` and records it on the tape as one node whose backward
/// pass runs [`adjoint_backward`]. Memory does not depend on the number of
/// solver steps.
#[allow(clippy::too_many_arguments)]
pub fn odeint_adjoint(
    tape: &mut Tape,
    f: Arc<dyn OdeDynamics>,
    z0: Var,
    t0: f64,
    t1: f64,
    ctx: Option<Var>,
    params: &[Var],
    cfg: &SolverConfig,
) -> Result<(Var, SolveStats)> {
    let pvals: Vec<Tensor> = params.iter().map(|&p| tape.value(p).clone()).collect();
    let cval = ctx.map(|c| tape.value(c).clone());
    let z0v = tape.value(z0).clone();
    let (z1, stats) = {
        let sys = System::new(f.as_ref(), &pvals).with_ctx(cval.as_ref());
        let (z, st) = integrate(sys.flat_rhs(z0v.shape()), z0v.data(), t0, t1, cfg)?;
        (Tensor::new(z0v.shape().to_vec(), z)?, st)
    };
    let mut inputs = vec![z0];
    inputs.extend_from_slice(params);
    inputs.extend(ctx);
    let op = AdjointOp {
        f,
        t0,
        t1,
        nparams: params.len(),
        cfg: *cfg,
    };
    let out = tape.custom(&inputs, z1, Box::new(op))?;
    Ok((out, stats))
}
