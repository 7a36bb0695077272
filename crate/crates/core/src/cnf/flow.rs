//! Flows recorded on the tape, trainable by direct backprop or the adjoint.
//!
//! Training needs `Δlogp` to be differentiable in the parameters, so every
//! flow supplies its trace as tape operations ([`FlowDynamics`]). For the
//! MLP field `f = W2 act(W1 [z, t] + Wh h)` the Jacobian is
//! `W2 diag(act'(a)) W1z`, hence
//!
//! ```text
//! Tr = Σ_j act'(a_j) (W1z W2)_jj
//! εᵀJε = Σ_j act'(a_j) (ε W2)_j (W1z ε)_j
//! ```

use std::sync::Arc;

use crate::autograd::{Tape, Tensor, Var};
use crate::cnf::TraceEstimator;
use crate::error::{Error, Result};
use crate::ode::{
    odeint_adjoint, solve_on_tape, LinearDynamics, MlpDynamics, OdeDynamics, SolveStats, SolverConfig, ZeroDynamics,
};

pub trait FlowDynamics: OdeDynamics {
    /// `f` together with the per-point trace of `∂f/∂z`, or the mean of
    /// `εᵀ(∂f/∂z)ε` over `probes` when any are given.
    fn eval_and_trace(
        &self,
        tape: &mut Tape,
        z: Var,
        t: f64,
        ctx: Option<Var>,
        params: &[Var],
        probes: &[Var],
    ) -> Result<(Var, Var)>;
}

fn mean_of(tape: &mut Tape, parts: Vec<Var>) -> Result<Var> {
    let n = parts.len() as f64;
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    if n > 1.0 {
        acc = tape.scale(acc, 1.0 / n)?;
    }
    Ok(acc)
}

impl FlowDynamics for MlpDynamics {
    fn eval_and_trace(
        &self,
        tape: &mut Tape,
        z: Var,
        t: f64,
        ctx: Option<Var>,
        params: &[Var],
        probes: &[Var],
    ) -> Result<(Var, Var)> {
        let a = self.pre_activation(tape, z, t, ctx, params)?;
        let s = self.act.apply(tape, a)?;
        let f = tape.matmul_t(s, params[1])?;
        let ds = self.act.derivative(tape, a)?;
        let tr = if probes.is_empty() {
            let diag = self.jacobian_diag_weights(tape, params)?;
            let p = tape.mul(ds, diag)?;
            tape.sum_last(p)?
        } else {
            let w1z = tape.slice(params[0], 0, self.dim)?;
            let mut est = Vec::with_capacity(probes.len());
            for &eps in probes {
                let u = tape.matmul(eps, params[1])?;
                let v = tape.matmul_t(eps, w1z)?;
                let uv = tape.mul(u, v)?;
                let p = tape.mul(ds, uv)?;
                est.push(tape.sum_last(p)?);
            }
            mean_of(tape, est)?
        };
        Ok((f, tr))
    }
}

impl FlowDynamics for LinearDynamics {
    fn eval_and_trace(
        &self,
        tape: &mut Tape,
        z: Var,
        t: f64,
        ctx: Option<Var>,
        params: &[Var],
        probes: &[Var],
    ) -> Result<(Var, Var)> {
        let f = self.eval_on_tape(tape, z, t, ctx, params)?;
        let a = params[0];
        let tr = if probes.is_empty() {
            let d = tape.shape(a)[0];
            let eye = tape.constant(Tensor::eye(d))?;
            let diag = tape.mul(a, eye)?;
            let tr = tape.sum(diag)?;
            let zs = tape.sum_last(z)?;
            let zero = tape.scale(zs, 0.0)?;
            tape.add(zero, tr)?
        } else {
            let mut est = Vec::with_capacity(probes.len());
            for &eps in probes {
                let ae = tape.matmul_t(eps, a)?;
                let p = tape.mul(ae, eps)?;
                est.push(tape.sum_last(p)?);
            }
            mean_of(tape, est)?
        };
        Ok((f, tr))
    }
}

impl FlowDynamics for ZeroDynamics {
    fn eval_and_trace(
        &self,
        tape: &mut Tape,
        z: Var,
        _t: f64,
        _ctx: Option<Var>,
        _params: &[Var],
        _probes: &[Var],
    ) -> Result<(Var, Var)> {
        let f = tape.scale(z, 0.0)?;
        let zs = tape.sum_last(z)?;
        let tr = tape.scale(zs, 0.0)?;
        Ok((f, tr))
    }
}

/// The field on `[.., d+1]` states whose last column accumulates the trace.
#[derive(Clone)]
pub struct AugmentedFlow<F> {
    pub inner: F,
    pub dim: usize,
    /// Hutchinson probes, fixed for a whole solve; empty for exact traces.
    pub probes: Vec<Tensor>,
}

impl<F: FlowDynamics> OdeDynamics for AugmentedFlow<F> {
    fn eval_on_tape(&self, tape: &mut Tape, s: Var, t: f64, ctx: Option<Var>, params: &[Var]) -> Result<Var> {
        let d = self.dim;
        let z = tape.slice(s, 0, d)?;
        let probes = self
            .probes
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let (f, tr) = self.inner.eval_and_trace(tape, z, t, ctx, params, &probes)?;
        let mut shape = tape.shape(tr).to_vec();
        shape.push(1);
        let tr = tape.reshape(tr, shape)?;
        tape.concat(&[f, tr])
    }
}

pub struct FlowOutput {
    pub z1: Var,
    /// Per-point `∫ Tr dt`, shape of `z` without its last axis.
    pub delta_logp: Var,
    pub stats: SolveStats,
}

/// Integrates a flow on the tape. With `adjoint`, the solve is one node and
/// its gradients come from the adjoint system; otherwise every step of a
/// fixed-step method is recorded.
#[allow(clippy::too_many_arguments)]
pub fn cnf_on_tape<F: FlowDynamics + Clone + 'static>(
    tape: &mut Tape,
    f: &F,
    z0: Var,
    t0: f64,
    t1: f64,
    ctx: Option<Var>,
    params: &[Var],
    cfg: &SolverConfig,
    est: &TraceEstimator,
    adjoint: bool,
) -> Result<FlowOutput> {
    let zshape = tape.shape(z0).to_vec();
    let d = *zshape.last().ok_or_else(|| Error::InvalidArgument("scalar flow state".into()))?;
    est.validate(d)?;
    let mut col = zshape.clone();
    *col.last_mut().unwrap() = 1;
    let zeros = tape.constant(Tensor::zeros(col))?;
    let s0 = tape.concat(&[z0, zeros])?;
    let aug = AugmentedFlow {
        inner: f.clone(),
        dim: d,
        probes: est.draw(&zshape),
    };
    let (s1, stats) = if adjoint {
        odeint_adjoint(tape, Arc::new(aug), s0, t0, t1, ctx, params, cfg)?
    } else {
        let s1 = solve_on_tape(tape, &aug, s0, t0, t1, ctx, params, cfg.method, cfg.steps)?;
        (s1, SolveStats::default())
    };
    let z1 = tape.slice(s1, 0, d)?;
    let dl = tape.slice(s1, d, d + 1)?;
    let delta_logp = tape.reshape(dl, zshape[..zshape.len() - 1].to_vec())?;
    Ok(FlowOutput { z1, delta_logp, stats })
}
