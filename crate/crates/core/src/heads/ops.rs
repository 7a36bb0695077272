//! Output layers as tape functions. Every head maps context states `[C, D]`
//! to log-probabilities `[C, V]` whose rows are normalized.

use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::cnf::{cnf_on_tape, TraceEstimator};
use crate::error::{shape_err, Error, Result};
use crate::nn::linear_forward;
use crate::ode::{odeint_adjoint, solve_on_tape, MlpDynamics, SolverConfig};

/// How heads with ODE blocks integrate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeOptions {
    pub solver: SolverConfig,
    pub t0: f64,
    pub t1: f64,
    /// Adjoint gradients; otherwise backprop through a fixed-step solve.
    pub adjoint: bool,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            t0: 0.0,
            t1: 1.0,
            adjoint: true,
        }
    }
}

fn ode_on_tape(
    tape: &mut Tape,
    f: &MlpDynamics,
    z0: Var,
    ctx: Option<Var>,
    params: &[Var],
    opts: &OdeOptions,
) -> Result<Var> {
    if opts.adjoint {
        Ok(odeint_adjoint(tape, Arc::new(*f), z0, opts.t0, opts.t1, ctx, params, &opts.solver)?.0)
    } else {
        solve_on_tape(tape, f, z0, opts.t0, opts.t1, ctx, params, opts.solver.method, opts.solver.steps)
    }
}

/// `h Eᵀ + b`.
pub fn logits(tape: &mut Tape, h: Var, e: Var, bias: Option<Var>) -> Result<Var> {
    linear_forward(tape, e, bias, h)
}

pub fn softmax_head(tape: &mut Tape, h: Var, e: Var, bias: Option<Var>) -> Result<Var> {
    let l = logits(tape, h, e, bias)?;
    tape.log_softmax(l)
}

/// `log π = log_softmax(g W_πᵀ)`, `[C, K]`.
pub fn log_mixture_weights(tape: &mut Tape, g: Var, prior: Var) -> Result<Var> {
    let s = tape.matmul_t(g, prior)?;
    tape.log_softmax(s)
}

/// `log Σ_k π_k p_k` from component log-probabilities `[C, V]` each and
/// `log π: [C, K]`.
pub fn mix(tape: &mut Tape, components: &[Var], log_pi: Var) -> Result<Var> {
    let k = components.len();
    if k == 0 || tape.shape(log_pi).last() != Some(&k) {
        return Err(shape_err("mix", format!("{k} components, log π {:?}", tape.shape(log_pi))));
    }
    let v = tape.shape(components[0])[1];
    let stacked = tape.stack(components)?;
    let lp = tape.tile_rows(log_pi, v)?;
    let joint = tape.add(stacked, lp)?;
    tape.logsumexp(joint)
}

/// Mixture of softmaxes: components `tanh(W_k g) Eᵀ + b`, weights from
/// `softmax(W_π g)`.
pub fn mos_head(tape: &mut Tape, g: Var, proj: &[Var], prior: Var, e: Var, bias: Option<Var>) -> Result<Var> {
    if proj.is_empty() {
        return Err(Error::InvalidArgument("mixture needs K >= 1".into()));
    }
    let mut comps = Vec::with_capacity(proj.len());
    for &w in proj {
        let pre = tape.matmul_t(g, w)?;
        let hk = tape.tanh(pre)?;
        comps.push(softmax_head(tape, hk, e, bias)?);
    }
    let log_pi = log_mixture_weights(tape, g, prior)?;
    mix(tape, &comps, log_pi)
}

/// Expands a per-layer assignment `i_n` into the layer index of each of
/// the `J = Σ i_n` components.
pub fn doc_component_layers(assignment: &[usize], j: usize) -> Result<Vec<usize>> {
    let total: usize = assignment.iter().sum();
    if total != j || j == 0 {
        return Err(Error::InvalidArgument(format!("DOC assignment {assignment:?} sums to {total}, expected J = {j}")));
    }
    Ok(assignment
        .iter()
        .enumerate()
        .flat_map(|(n, &c)| std::iter::repeat_n(n, c))
        .collect())
}

/// Direct output connections: component `j` reads layer `n(j)` through
/// `tanh(W_j h^n)`, all share the output matrix; weights come from the
/// last layer.
pub fn doc_head(
    tape: &mut Tape,
    layers: &[Var],
    assignment: &[usize],
    proj: &[Var],
    prior: Var,
    e: Var,
    bias: Option<Var>,
) -> Result<Var> {
    if assignment.len() != layers.len() {
        return Err(Error::InvalidArgument(format!(
            "DOC assignment has {} entries for {} layers",
            assignment.len(),
            layers.len()
        )));
    }
    let which = doc_component_layers(assignment, proj.len())?;
    let mut comps = Vec::with_capacity(proj.len());
    for (&w, &n) in proj.iter().zip(&which) {
        let pre = tape.matmul_t(layers[n], w)?;
        let k = tape.tanh(pre)?;
        comps.push(softmax_head(tape, k, e, bias)?);
    }
    let last = *layers.last().expect("non-empty");
    let log_pi = log_mixture_weights(tape, last, prior)?;
    mix(tape, &comps, log_pi)
}

/// Logits moved by an ODE over logit space before normalization. Returns
/// `(l1, log_softmax(l1))`.
pub fn node_logit_head(
    tape: &mut Tape,
    h: Var,
    e: Var,
    bias: Option<Var>,
    f: &MlpDynamics,
    params: &[Var],
    opts: &OdeOptions,
) -> Result<(Var, Var)> {
    let l0 = logits(tape, h, e, bias)?;
    let l1 = ode_on_tape(tape, f, l0, None, params, opts)?;
    Ok((l1, tape.log_softmax(l1)?))
}

pub struct CnfHeadOutput {
    pub logp: Var,
    /// `[V]` for the shared flow, `[C, V]` for context flows.
    pub delta_logp: Var,
    /// Raw scores `h Eᵀ + b`.
    pub logits0: Var,
}

/// One flow over the rows of `E`, shared by all contexts:
/// `logp = log_softmax(logp0 - Δlogp)`.
#[allow(clippy::too_many_arguments)]
pub fn cnf_head(
    tape: &mut Tape,
    h: Var,
    e: Var,
    bias: Option<Var>,
    f: &MlpDynamics,
    params: &[Var],
    opts: &OdeOptions,
    est: &TraceEstimator,
) -> Result<CnfHeadOutput> {
    if f.ctx_dim.is_some() {
        return Err(Error::InvalidArgument("cnf_head dynamics must not depend on the context".into()));
    }
    let logits0 = logits(tape, h, e, bias)?;
    let logp0 = tape.log_softmax(logits0)?;
    let out = cnf_on_tape(tape, f, e, opts.t0, opts.t1, None, params, &opts.solver, est, opts.adjoint)?;
    let shifted = tape.sub(logp0, out.delta_logp)?;
    Ok(CnfHeadOutput {
        logp: tape.log_softmax(shifted)?,
        delta_logp: out.delta_logp,
        logits0,
    })
}

/// Repeats `e: [V, D]` once per context: `[C, V, D]`.
pub fn tile_table(tape: &mut Tape, e: Var, contexts: usize) -> Result<Var> {
    let s = tape.shape(e).to_vec();
    let mut one = vec![1];
    one.extend_from_slice(&s);
    let e1 = tape.reshape(e, one)?;
    let t = tape.tile_rows(e1, contexts)?;
    let mut out = vec![contexts];
    out.extend_from_slice(&s);
    tape.reshape(t, out)
}

/// One flow per context, conditioned on `h`; all contexts share one solve.
/// Refuses when the stacked state `C x V x D` exceeds `budget` elements.
#[allow(clippy::too_many_arguments)]
pub fn context_cnf_head(
    tape: &mut Tape,
    h: Var,
    e: Var,
    bias: Option<Var>,
    f: &MlpDynamics,
    params: &[Var],
    opts: &OdeOptions,
    est: &TraceEstimator,
    budget: usize,
) -> Result<CnfHeadOutput> {
    if f.ctx_dim.is_none() {
        return Err(Error::InvalidArgument("context_cnf_head dynamics need a context input".into()));
    }
    let c = tape.shape(h)[0];
    let (v, d) = (tape.shape(e)[0], tape.shape(e)[1]);
    let requested = c * v * d;
    if requested > budget {
        return Err(Error::MemoryBudget { requested, budget });
    }
    let logits0 = logits(tape, h, e, bias)?;
    let logp0 = tape.log_softmax(logits0)?;
    let z0 = tile_table(tape, e, c)?;
    let out = cnf_on_tape(tape, f, z0, opts.t0, opts.t1, Some(h), params, &opts.solver, est, opts.adjoint)?;
    let shifted = tape.sub(logp0, out.delta_logp)?;
    Ok(CnfHeadOutput {
        logp: tape.log_softmax(shifted)?,
        delta_logp: out.delta_logp,
        logits0,
    })
}
