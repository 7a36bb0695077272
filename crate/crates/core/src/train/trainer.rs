//! Truncated-BPTT training with hidden-state carry, and evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Tensor};
use crate::data::batchify;
use crate::error::{Error, Result};
use crate::sampling::build_unigram;
use crate::train::{metrics, sgd_clip_step, AsgdState, LanguageModel, Metrics, MetricsRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    NtAsgd,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "nt-asgd" | "ntasgd" => Ok(Optimizer::NtAsgd),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (sgd|nt-asgd)"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::NtAsgd => "nt-asgd",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip: f64,
    pub bptt: usize,
    pub batch: usize,
    pub eval_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// `L`: steps between validation checks of the averaging trigger.
    pub log_interval: usize,
    /// `n`: evaluations the metric may fail to improve before averaging.
    pub nonmono: usize,
    /// Validation windows used by the trigger check.
    pub trigger_windows: usize,
    /// Noise words per position for the sampled loss; `None` trains on the
    /// full softmax.
    pub is_samples: Option<usize>,
    pub is_alpha: f64,
    /// Cap on validation windows per evaluation.
    pub max_eval_windows: Option<usize>,
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            clip: 0.25,
            bptt: 35,
            batch: 20,
            eval_batch: 10,
            epochs: 1,
            seed: 0,
            optimizer: Optimizer::Sgd,
            log_interval: 100,
            nonmono: 5,
            trigger_windows: 20,
            is_samples: None,
            is_alpha: 1.0,
            max_eval_windows: None,
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config(format!("lr {} and clip {} must be > 0", self.lr, self.clip)));
        }
        if self.bptt == 0 || self.batch == 0 || self.eval_batch == 0 || self.log_interval == 0 || self.nonmono == 0 {
            return Err(Error::Config("bptt, batch sizes and intervals must be >= 1".into()));
        }
        if self.is_samples == Some(0) {
            return Err(Error::Config("is_samples must be >= 1".into()));
        }
        Ok(())
    }
}

pub struct TrainReport {
    pub steps: usize,
    pub skipped_steps: usize,
    /// Validation metrics at the end of each epoch.
    pub valid: Vec<Metrics>,
    /// Validation metrics of the averaged parameters (NT-ASGD only).
    pub average_valid: Option<Metrics>,
    pub best_valid: Metrics,
    pub triggered_at: Option<usize>,
    pub best_params: Vec<Tensor>,
    pub last_params: Vec<Tensor>,
    pub average_params: Option<Vec<Tensor>>,
    pub wallclock_s: f64,
}

/// Mean per-token NLL of `model` on `stream`, dropout off.
pub fn evaluate(model: &LanguageModel, stream: &[usize], batch: usize, bptt: usize, max_windows: Option<usize>) -> Result<Metrics> {
    let windows = batchify(stream, batch, bptt)?;
    let n = windows.len().min(max_windows.unwrap_or(usize::MAX));
    let mut state = model.init_state(batch);
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..n {
        let w = windows.window(i)?;
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape)?;
        let (loss, next) = model.window_loss::<ChaCha8Rng>(&mut tape, &bound, &w, &state, None, None)?;
        let tokens = w.targets.len();
        total += tape.value(loss).item()? * tokens as f64;
        count += tokens;
        state = next;
    }
    if count == 0 {
        return Err(Error::StreamTooShort { len: stream.len(), needed: batch * (bptt + 1) });
    }
    Ok(metrics(total / count as f64))
}

/// Trains in place. `on_row` receives one metric row per evaluation. On
/// return the model holds the parameters with the best validation NLL
/// (an end-of-epoch iterate or the NT-ASGD average).
pub fn train(
    model: &mut LanguageModel,
    train: &[usize],
    valid: &[usize],
    cfg: &TrainConfig,
    on_row: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !cfg.freeze.is_empty() {
        model.store.freeze(&cfg.freeze)?;
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let windows = batchify(train, cfg.batch, cfg.bptt)?;
    let sampler = match cfg.is_samples {
        Some(k) => Some((build_unigram(train, model.cfg.vocab, cfg.is_alpha)?, k)),
        None => None,
    };
    let mut asgd = match cfg.optimizer {
        Optimizer::NtAsgd => Some(AsgdState::new(cfg.log_interval, cfg.nonmono, &model.store.values())?),
        Optimizer::Sgd => None,
    };
    let eval = |m: &LanguageModel, cap: Option<usize>| evaluate(m, valid, cfg.eval_batch, cfg.bptt, cap);

    let (mut steps, mut skipped) = (0, 0);
    let mut valid_hist = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Metrics, Vec<Tensor>)> = None;
    for epoch in 1..=cfg.epochs {
        let mut state = model.init_state(cfg.batch);
        let (mut sum, mut count) = (0.0, 0usize);
        for w in windows.iter() {
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape)?;
            let s = sampler.as_ref().map(|(q, k)| (q, *k));
            let (loss, next) = model.window_loss(&mut tape, &bound, &w, &state, Some(&mut rng), s)?;
            state = next;
            let lv = tape.value(loss).item()?;
            let grads = tape.backward(loss)?;
            let g = model.store.gradients(&bound, &grads);
            match sgd_clip_step(&mut model.store, &g, cfg.lr, cfg.clip) {
                Ok(_) => {}
                Err(Error::NonFinite(what)) => {
                    log::warn!("step {steps}: non-finite {what}; update skipped");
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
            if lv.is_finite() {
                sum += lv;
                count += 1;
            }
            if let Some(st) = asgd.as_mut() {
                if st.needs_eval() {
                    let v = eval(model, Some(cfg.trigger_windows))?;
                    if st.record(v.ppl) {
                        log::info!("averaging triggered at iteration {}", st.iteration());
                    }
                }
                st.advance(&model.store.values())?;
            }
            steps += 1;
        }
        let secs = start.elapsed().as_secs_f64();
        if count > 0 {
            on_row(&MetricsRow::new(epoch, steps, "train", sum / count as f64, secs))?;
        }
        let v = eval(model, cfg.max_eval_windows)?;
        on_row(&MetricsRow::new(epoch, steps, "valid", v.nll, start.elapsed().as_secs_f64()))?;
        log::info!("epoch {epoch}: valid nll {:.4} ppl {:.3} bpc {:.4}", v.nll, v.ppl, v.bpc);
        if best.as_ref().is_none_or(|(b, _)| v.nll < b.nll) {
            best = Some((v, model.store.values()));
        }
        valid_hist.push(v);
    }

    let last_params = model.store.values();
    let (mut best_valid, mut best_params) = best.ok_or_else(|| Error::Config("epochs must be >= 1".into()))?;
    let mut average_valid = None;
    let mut average_params = None;
    let triggered_at = asgd.as_ref().and_then(AsgdState::triggered_at);
    if let Some(st) = &asgd {
        let avg = st.average();
        model.store.set_values(&avg)?;
        let v = eval(model, cfg.max_eval_windows)?;
        on_row(&MetricsRow::new(cfg.epochs, steps, "valid_avg", v.nll, start.elapsed().as_secs_f64()))?;
        if v.nll < best_valid.nll {
            best_valid = v;
            best_params = avg.clone();
        }
        average_valid = Some(v);
        average_params = Some(avg);
    }
    model.store.set_values(&best_params)?;
    Ok(TrainReport {
        steps,
        skipped_steps: skipped,
        valid: valid_hist,
        average_valid,
        best_valid,
        triggered_at,
        best_params,
        last_params,
        average_params,
        wallclock_s: start.elapsed().as_secs_f64(),
    })
}
