//! Losses, metrics, optimizers, checkpoints and the training loop.

mod checkpoint;
mod log;
mod model;
mod optim;
mod trainer;

use std::f64::consts::LN_2;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, LoadMode, CHECKPOINT_VERSION, MAGIC};
pub use log::{MetricsLog, MetricsRow, METRICS_HEADER};
pub use model::{LanguageModel, ModelConfig, WindowForward};
pub use optim::{global_norm, sgd_clip_step, AsgdState};
pub use trainer::{evaluate, train, Optimizer, TrainConfig, TrainReport};

/// `-logp[target]` for one normalized row of natural-log probabilities.
pub fn cross_entropy_loss(logp: &[f64], target: usize) -> Result<f64> {
    logp.get(target)
        .map(|&l| -l)
        .ok_or(Error::OutOfRange { index: target, extent: logp.len() })
}

/// Mean of `-logp[c, targets[c]]` over the rows of `logp: [C, V]`.
pub fn nll_on_tape(tape: &mut Tape, logp: Var, targets: &[usize]) -> Result<Var> {
    let s = tape.shape(logp);
    if s.len() != 2 || s[0] != targets.len() {
        return Err(shape_err("nll", format!("logp {s:?} for {} targets", targets.len())));
    }
    let picked = tape.pick(logp, targets)?;
    let m = tape.mean(picked)?;
    tape.neg(m)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Metrics {
    /// Mean per-token negative log-likelihood in nats.
    pub nll: f64,
    pub ppl: f64,
    pub bpc: f64,
}

pub fn metrics(nll: f64) -> Metrics {
    Metrics {
        nll,
        ppl: nll.exp(),
        bpc: nll / LN_2,
    }
}
