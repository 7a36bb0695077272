//! Unigram noise distribution and the importance-sampled softmax loss.
//!
//! The sampled loss for a context with candidate set `S` (true word first,
//! then `k` i.i.d. draws from `Q`, duplicates kept) is
//! `-log_softmax(l_S - log Q_S)[0]`.

use rand::Rng;

use crate::autograd::{kernels, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug)]
pub struct UnigramTable {
    counts: Vec<u64>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    threshold: Vec<f64>,
    alias: Vec<usize>,
}

/// Counts `stream` over a vocabulary of `vocab` ids and smooths with
/// `Q_w ∝ count_w + alpha`.
pub fn build_unigram(stream: &[usize], vocab: usize, alpha: f64) -> Result<UnigramTable> {
    if stream.is_empty() {
        return Err(Error::EmptyStream);
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("smoothing {alpha}")));
    }
    let mut counts = vec![0u64; vocab];
    for &id in stream {
        if id >= vocab {
            return Err(Error::OutOfRange { index: id, extent: vocab });
        }
        counts[id] += 1;
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 + alpha).collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let log_probs = probs.iter().map(|p| p.ln()).collect();
    let (threshold, alias) = alias_tables(&probs);
    Ok(UnigramTable {
        counts,
        probs,
        log_probs,
        threshold,
        alias,
    })
}

// Vose's alias method.
fn alias_tables(probs: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = probs.len();
    let mut scaled: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
    let mut threshold = vec![1.0; n];
    let mut alias: Vec<usize> = (0..n).collect();
    let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
    while let (Some(s), Some(&l)) = (small.pop(), large.last()) {
        threshold[s] = scaled[s];
        alias[s] = l;
        scaled[l] -= 1.0 - scaled[s];
        if scaled[l] < 1.0 {
            large.pop();
            small.push(l);
        }
    }
    (threshold, alias)
}

/// Candidate ids with their `log Q`; position 0 is the true word.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledBatch {
    pub ids: Vec<usize>,
    pub log_q: Vec<f64>,
}

impl UnigramTable {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let i = rng.gen_range(0..self.probs.len());
        if rng.gen::<f64>() < self.threshold[i] {
            i
        } else {
            self.alias[i]
        }
    }

    /// `k` i.i.d. draws; duplicates and the true word may appear.
    pub fn sample_noise<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        (0..k).map(|_| self.sample(rng)).collect()
    }

    pub fn sampled_batch<R: Rng + ?Sized>(&self, target: usize, k: usize, rng: &mut R) -> Result<SampledBatch> {
        if target >= self.len() {
            return Err(Error::OutOfRange { index: target, extent: self.len() });
        }
        let mut ids = Vec::with_capacity(k + 1);
        ids.push(target);
        ids.extend(self.sample_noise(k, rng));
        let log_q = ids.iter().map(|&i| self.log_probs[i]).collect();
        Ok(SampledBatch { ids, log_q })
    }
}

/// `-log_softmax(logits - log_q)[0]`.
pub fn is_loss(logits: &[f64], log_q: &[f64]) -> Result<f64> {
    if logits.len() != log_q.len() || logits.is_empty() {
        return Err(shape_err("is_loss", format!("{} logits, {} log Q", logits.len(), log_q.len())));
    }
    let corrected: Vec<f64> = logits.iter().zip(log_q).map(|(l, q)| l - q).collect();
    Ok(kernels::logsumexp(&corrected) - corrected[0])
}

/// Mean sampled loss over contexts; `logits, log_q: [C, k+1]`.
pub fn is_loss_on_tape(tape: &mut Tape, logits: Var, log_q: &Tensor) -> Result<Var> {
    if tape.shape(logits) != log_q.shape() || log_q.rank() != 2 {
        return Err(shape_err("is_loss", format!("logits {:?}, log Q {:?}", tape.shape(logits), log_q.shape())));
    }
    let q = tape.constant(log_q.clone())?;
    let c = tape.sub(logits, q)?;
    let lp = tape.log_softmax(c)?;
    let first = tape.pick(lp, &vec![0; log_q.shape()[0]])?;
    let m = tape.mean(first)?;
    tape.neg(m)
}
