//! The six interchangeable output layers.
//!
//! [`ops`] holds the heads as plain tape functions; [`Head`] owns the
//! parameters of one configured head inside a [`ParamStore`].

pub mod ops;
#[cfg(test)]
mod tests;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Tape, Tensor, Var};
use crate::cnf::{cnf_on_tape, TraceEstimator};
use crate::error::{Error, Result};
use crate::nn::{init_fan_in, Bound, ParamId, ParamStore};
use crate::ode::{Activation, MlpDynamics};

pub use ops::{
    cnf_head, context_cnf_head, doc_component_layers, doc_head, log_mixture_weights, logits, mix, mos_head,
    node_logit_head, softmax_head, tile_table, CnfHeadOutput, OdeOptions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Softmax,
    Mos,
    Doc,
    NodeLogit,
    Cnf,
    ContextCnf,
}

impl HeadKind {
    pub const ALL: [HeadKind; 6] = [
        HeadKind::Softmax,
        HeadKind::Mos,
        HeadKind::Doc,
        HeadKind::NodeLogit,
        HeadKind::Cnf,
        HeadKind::ContextCnf,
    ];

    pub fn has_flow(self) -> bool {
        matches!(self, HeadKind::NodeLogit | HeadKind::Cnf | HeadKind::ContextCnf)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Softmax => "softmax",
            HeadKind::Mos => "mos",
            HeadKind::Doc => "doc",
            HeadKind::NodeLogit => "node_logit",
            HeadKind::Cnf => "cnf",
            HeadKind::ContextCnf => "context_cnf",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown head {s:?}")))
    }
}

/// Which matrix of a head to read out, one row per context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixKind {
    /// Scores before the final normalization.
    Logits,
    Logp,
    DeltaLogp,
}

impl FromStr for MatrixKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(MatrixKind::Logits),
            "logp" => Ok(MatrixKind::Logp),
            "delta_logp" => Ok(MatrixKind::DeltaLogp),
            _ => Err(Error::Config(format!("unknown matrix kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub vocab: usize,
    /// Width of the final context state.
    pub dim: usize,
    /// Width of every encoder layer, last one equal to `dim`; used by DOC.
    pub layer_dims: Vec<usize>,
    /// `K` for MoS, `J` for DOC.
    pub components: usize,
    /// Components drawn from each layer (DOC); empty means split evenly
    /// over the last two layers.
    pub doc_assignment: Vec<usize>,
    /// Hidden width of the flow field (bottleneck `k` for the logit ODE).
    pub flow_hidden: usize,
    /// Flow nonlinearity; `None` picks softplus for the logit ODE and relu
    /// for the CNF heads.
    pub activation: Option<Activation>,
    pub ode: OdeOptions,
    pub trace: TraceEstimator,
    pub bias: bool,
    /// Element cap on the `C x V x D` state of context flows.
    pub memory_budget: usize,
}

impl HeadConfig {
    pub fn new(kind: HeadKind, vocab: usize, dim: usize) -> Self {
        Self {
            kind,
            vocab,
            dim,
            layer_dims: vec![dim],
            components: 1,
            doc_assignment: Vec::new(),
            flow_hidden: dim,
            activation: None,
            ode: OdeOptions::default(),
            trace: TraceEstimator::exact(),
            bias: true,
            memory_budget: 50_000_000,
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation.unwrap_or(match self.kind {
            HeadKind::NodeLogit => Activation::Softplus,
            _ => Activation::Relu,
        })
    }

    /// The per-layer DOC assignment after defaults.
    pub fn assignment(&self) -> Vec<usize> {
        if !self.doc_assignment.is_empty() {
            return self.doc_assignment.clone();
        }
        let n = self.layer_dims.len();
        let mut a = vec![0; n];
        if n == 1 {
            a[0] = self.components;
        } else {
            a[n - 1] = self.components.div_ceil(2);
            a[n - 2] = self.components / 2;
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.dim == 0 {
            return Err(Error::Config(format!("head needs vocab >= 1 and dim >= 1 ({}x{})", self.vocab, self.dim)));
        }
        if self.layer_dims.last() != Some(&self.dim) {
            return Err(Error::Config(format!("last layer width {:?} differs from head dim {}", self.layer_dims.last(), self.dim)));
        }
        match self.kind {
            HeadKind::Mos | HeadKind::Doc if self.components == 0 => {
                return Err(Error::Config("mixture heads need components >= 1".into()))
            }
            HeadKind::Doc => {
                let a = self.assignment();
                if a.len() != self.layer_dims.len() || a.iter().sum::<usize>() != self.components {
                    return Err(Error::Config(format!(
                        "doc assignment {a:?} must have one entry per layer and sum to {}",
                        self.components
                    )));
                }
            }
            k if k.has_flow() && self.flow_hidden == 0 => return Err(Error::Config("flow_hidden must be >= 1".into())),
            _ => {}
        }
        if self.kind.has_flow() {
            self.ode.solver.validate()?;
            self.trace.validate(if self.kind == HeadKind::NodeLogit { self.vocab } else { self.dim })?;
        }
        Ok(())
    }
}

/// Values produced by one head evaluation.
pub struct HeadForward {
    /// `[C, V]`, rows normalized.
    pub logp: Var,
    /// Pre-normalization scores, when the head has a single logit matrix
    /// (`h Eᵀ + b - Δlogp` for the CNF heads).
    pub logits: Option<Var>,
    /// `[V]` (shared flow) or `[C, V]` (context flow).
    pub delta_logp: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub cfg: HeadConfig,
    /// Output matrix `E: [V, D]`, possibly the input embedding table.
    pub output: ParamId,
    pub bias: Option<ParamId>,
    pub proj: Vec<ParamId>,
    pub prior: Option<ParamId>,
    pub flow: Vec<ParamId>,
    pub dynamics: Option<MlpDynamics>,
}

impl Head {
    /// Registers the head's parameters under `head.*`. With `tied`, the
    /// given embedding table doubles as the output matrix and must be
    /// `[V, D]`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: HeadConfig, tied: Option<ParamId>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (v, d) = (cfg.vocab, cfg.dim);
        let output = match tied {
            Some(id) => {
                let s = store.get(id).shape();
                if s != [v, d] {
                    return Err(Error::Config(format!(
                        "tied embeddings need embedding size == final hidden size: table {s:?}, head [{v}, {d}]"
                    )));
                }
                id
            }
            None => store.add("head.out.weight", Tensor::uniform([v, d], -0.1, 0.1, rng))?,
        };
        let bias = if cfg.bias {
            Some(store.add("head.out.bias", Tensor::zeros([v]))?)
        } else {
            None
        };
        let mut proj = Vec::new();
        let mut prior = None;
        let mut flow = Vec::new();
        let mut dynamics = None;
        match cfg.kind {
            HeadKind::Softmax => {}
            HeadKind::Mos => {
                for k in 0..cfg.components {
                    proj.push(store.add(format!("head.mos.proj.{k}"), init_fan_in([d, d], d, rng))?);
                }
                prior = Some(store.add("head.mos.prior", init_fan_in([cfg.components, d], d, rng))?);
            }
            HeadKind::Doc => {
                let which = doc_component_layers(&cfg.assignment(), cfg.components)?;
                for (j, &n) in which.iter().enumerate() {
                    let dn = cfg.layer_dims[n];
                    proj.push(store.add(format!("head.doc.proj.{j}"), init_fan_in([d, dn], dn, rng))?);
                }
                prior = Some(store.add("head.doc.prior", init_fan_in([cfg.components, d], d, rng))?);
            }
            HeadKind::NodeLogit | HeadKind::Cnf | HeadKind::ContextCnf => {
                let f = match cfg.kind {
                    HeadKind::NodeLogit => MlpDynamics::new(v, cfg.flow_hidden, None, cfg.activation()),
                    HeadKind::Cnf => MlpDynamics::new(d, cfg.flow_hidden, None, cfg.activation()),
                    _ => MlpDynamics::new(d, cfg.flow_hidden, Some(d), cfg.activation()),
                };
                for ((name, _), value) in f.param_shapes().into_iter().zip(f.init_params(rng)) {
                    flow.push(store.add(format!("head.flow.{name}"), value)?);
                }
                dynamics = Some(f);
            }
        }
        Ok(Self {
            cfg,
            output,
            bias,
            proj,
            prior,
            flow,
            dynamics,
        })
    }

    fn flow_vars(&self, bound: &Bound) -> Vec<Var> {
        self.flow.iter().map(|&p| bound[p]).collect()
    }

    /// Log-probabilities for context states; `layers` holds every encoder
    /// layer's output `[C, D_n]`, the last one being the context vector.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, layers: &[Var]) -> Result<HeadForward> {
        let h = *layers.last().ok_or_else(|| Error::InvalidArgument("head needs at least one layer".into()))?;
        let e = bound[self.output];
        let b = self.bias.map(|b| bound[b]);
        let proj: Vec<Var> = self.proj.iter().map(|&p| bound[p]).collect();
        let ode = &self.cfg.ode;
        let est = &self.cfg.trace;
        Ok(match self.cfg.kind {
            HeadKind::Softmax => {
                let l = logits(tape, h, e, b)?;
                HeadForward {
                    logp: tape.log_softmax(l)?,
                    logits: Some(l),
                    delta_logp: None,
                }
            }
            HeadKind::Mos => HeadForward {
                logp: mos_head(tape, h, &proj, bound[self.prior.unwrap()], e, b)?,
                logits: None,
                delta_logp: None,
            },
            HeadKind::Doc => HeadForward {
                logp: doc_head(tape, layers, &self.cfg.assignment(), &proj, bound[self.prior.unwrap()], e, b)?,
                logits: None,
                delta_logp: None,
            },
            HeadKind::NodeLogit => {
                let f = self.dynamics.as_ref().unwrap();
                let (l1, logp) = node_logit_head(tape, h, e, b, f, &self.flow_vars(bound), ode)?;
                HeadForward {
                    logp,
                    logits: Some(l1),
                    delta_logp: None,
                }
            }
            HeadKind::Cnf | HeadKind::ContextCnf => {
                let f = self.dynamics.as_ref().unwrap();
                let fv = self.flow_vars(bound);
                let out = if self.cfg.kind == HeadKind::Cnf {
                    cnf_head(tape, h, e, b, f, &fv, ode, est)?
                } else {
                    context_cnf_head(tape, h, e, b, f, &fv, ode, est, self.cfg.memory_budget)?
                };
                let l = tape.sub(out.logits0, out.delta_logp)?;
                HeadForward {
                    logp: out.logp,
                    logits: Some(l),
                    delta_logp: Some(out.delta_logp),
                }
            }
        })
    }

    /// A `[C, M]` readout of the head for rank analysis.
    pub fn matrix(&self, tape: &mut Tape, bound: &Bound, layers: &[Var], kind: MatrixKind) -> Result<Var> {
        let out = self.forward(tape, bound, layers)?;
        match kind {
            MatrixKind::Logp => Ok(out.logp),
            MatrixKind::Logits => out
                .logits
                .ok_or_else(|| Error::Unsupported(format!("{} head has no single logit matrix", self.cfg.kind))),
            MatrixKind::DeltaLogp => {
                let dl = out
                    .delta_logp
                    .ok_or_else(|| Error::Unsupported(format!("{} head has no log-density change", self.cfg.kind)))?;
                let zero = tape.scale(out.logp, 0.0)?;
                tape.add(zero, dl)
            }
        }
    }

    /// Scores `l_{w,c}` of candidate words, `candidates` holding `k+1` ids
    /// per context (row-major), for the sampled loss. Supported for the
    /// softmax and both CNF heads.
    pub fn sampled_logits(&self, tape: &mut Tape, bound: &Bound, h: Var, candidates: &[usize], per_context: usize) -> Result<Var> {
        let c = tape.shape(h)[0];
        let d = self.cfg.dim;
        if per_context == 0 || candidates.len() != c * per_context {
            return Err(Error::InvalidArgument(format!(
                "{} candidates for {c} contexts of {per_context}",
                candidates.len()
            )));
        }
        let e = bound[self.output];
        let es = tape.gather_rows(e, candidates)?;
        let es = tape.reshape(es, [c, per_context, d])?;
        let ht = tape.tile_rows(h, per_context)?;
        let prod = tape.mul(es, ht)?;
        let mut l = tape.sum_last(prod)?;
        if let Some(b) = self.bias {
            let col = tape.reshape(bound[b], [self.cfg.vocab, 1])?;
            let bs = tape.gather_rows(col, candidates)?;
            let bs = tape.reshape(bs, [c, per_context])?;
            l = tape.add(l, bs)?;
        }
        let ode = &self.cfg.ode;
        match self.cfg.kind {
            HeadKind::Softmax => Ok(l),
            HeadKind::Cnf => {
                let f = self.dynamics.as_ref().unwrap();
                let fv = self.flow_vars(bound);
                let out = cnf_on_tape(tape, f, e, ode.t0, ode.t1, None, &fv, &ode.solver, &self.cfg.trace, ode.adjoint)?;
                let col = tape.reshape(out.delta_logp, [self.cfg.vocab, 1])?;
                let ds = tape.gather_rows(col, candidates)?;
                let ds = tape.reshape(ds, [c, per_context])?;
                tape.sub(l, ds)
            }
            HeadKind::ContextCnf => {
                let requested = c * per_context * d;
                if requested > self.cfg.memory_budget {
                    return Err(Error::MemoryBudget {
                        requested,
                        budget: self.cfg.memory_budget,
                    });
                }
                let f = self.dynamics.as_ref().unwrap();
                let fv = self.flow_vars(bound);
                let out = cnf_on_tape(tape, f, es, ode.t0, ode.t1, Some(h), &fv, &ode.solver, &self.cfg.trace, ode.adjoint)?;
                tape.sub(l, out.delta_logp)
            }
            k => Err(Error::Unsupported(format!("sampled training for the {k} head"))),
        }
    }
}
