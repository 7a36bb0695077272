//! Rank measurements on head outputs and the synthetic bottleneck
//! experiment.

mod bottleneck;
mod svd;

use serde::Serialize;

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::heads::{Head, MatrixKind};
use crate::nn::ParamStore;

pub use bottleneck::{bottleneck_experiment, svd_oracle_gap, BottleneckConfig, BottleneckReport, HeadResult};
pub use svd::{numerical_rank, singular_values, svd, Svd};

pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    pub head: String,
    pub rows: usize,
    pub cols: usize,
    pub tol: f64,
    pub rank: usize,
    pub singular_values: Vec<f64>,
}

impl RankReport {
    pub fn new(head: impl Into<String>, matrix: &Tensor, tol: f64) -> Result<Self> {
        let s = singular_values(matrix)?;
        let cut = tol * s.first().copied().unwrap_or(0.0);
        Ok(Self {
            head: head.into(),
            rows: matrix.shape()[0],
            cols: matrix.shape()[1],
            tol,
            rank: s.iter().filter(|&&x| x > cut).count(),
            singular_values: s,
        })
    }
}

/// The `[N, M]` readout of `head` for `N` contexts. `layers` holds each
/// encoder layer's states `[N, D_n]` (only the last is used except by DOC).
pub fn assemble_matrix(head: &Head, store: &ParamStore, layers: &[Tensor], kind: MatrixKind) -> Result<Tensor> {
    if layers.last().is_none_or(|h| h.rank() != 2 || h.shape()[0] == 0) {
        return Err(Error::InvalidArgument("need at least one context".into()));
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape)?;
    let vars = layers
        .iter()
        .map(|l| tape.constant(l.clone()))
        .collect::<Result<Vec<_>>>()?;
    let m = head.matrix(&mut tape, &bound, &vars, kind)?;
    Ok(tape.value(m).clone())
}
