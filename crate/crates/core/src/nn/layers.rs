//! Linear maps, embeddings, dropout and DropConnect.

use rand::Rng;

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::params::{Bound, ParamId, ParamStore};

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_fan_in<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut R) -> Tensor {
    let r = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -r, r, rng)
}

/// `W x (+ b)` on the last axis of `x`. `w` is `[out, in]`, row-major.
pub fn linear_forward(tape: &mut Tape, w: Var, b: Option<Var>, x: Var) -> Result<Var> {
    let y = tape.matmul_t(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init_fan_in([output, input], input, rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), init_fan_in([output], input, rng))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        linear_forward(tape, bound[self.weight], self.bias.map(|b| bound[b]), x)
    }
}

/// Token embedding table `E: |V| x d`.
///
/// When `tied`, the output layer reads the same parameter, so an update made
/// through either path is seen by both.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
    pub tied: bool,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        tied: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!("embedding {vocab}x{dim}")));
        }
        let table = store.add(format!("{name}.weight"), Tensor::uniform([vocab, dim], -0.1, 0.1, rng))?;
        Ok(Self {
            table,
            vocab,
            dim,
            tied,
        })
    }

    pub fn lookup(&self, tape: &mut Tape, bound: &Bound, ids: &[usize]) -> Result<Var> {
        embed_lookup(tape, bound[self.table], ids)
    }
}

/// Rows of `table` for each id: `[ids.len(), d]`.
pub fn embed_lookup(tape: &mut Tape, table: Var, ids: &[usize]) -> Result<Var> {
    tape.gather_rows(table, ids)
}

/// Bernoulli keep-mask scaled by `1/(1-p)`.
fn keep_mask<R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let scale = 1.0 / (1.0 - p);
    let data = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale }).collect();
    Tensor::new(shape.to_vec(), data).expect("mask shape")
}

fn check_prob(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("drop probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// DropConnect on a weight tensor. `rng = None` means eval mode (identity).
pub fn weight_drop<R: Rng + ?Sized>(tape: &mut Tape, w: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
    check_prob(p)?;
    match rng {
        Some(rng) if p > 0.0 => {
            let mask = keep_mask(tape.shape(w), p, rng);
            let m = tape.constant(mask)?;
            tape.mul(w, m)
        }
        _ => Ok(w),
    }
}

/// Value-level DropConnect, for use outside a tape.
pub fn weight_drop_tensor<R: Rng + ?Sized>(w: &Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
    check_prob(p)?;
    if p == 0.0 {
        return Ok(w.clone());
    }
    w.zip_map(&keep_mask(w.shape(), p, rng), |a, m| a * m)
}

/// Standard inverted dropout on activations. Identity when `rng` is `None`.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
    weight_drop(tape, x, p, rng)
}

pub(crate) fn check_last_dim(op: &'static str, tape: &Tape, x: Var, want: usize) -> Result<()> {
    let got = tape.shape(x).last().copied().unwrap_or(1);
    if got != want {
        return Err(shape_err(op, format!("last axis {got}, expected {want}")));
    }
    Ok(())
}
