//! Fitting a full-rank target distribution matrix with each head.
//!
//! The target is `A = log_softmax(G)` for a Gaussian `G: [N, M]`. Each head
//! gets its own free context matrix `H: [N, D]` and is trained by full-batch
//! Adam on the cross-entropy against `exp(A)`. The reported gap is the mean
//! row KL divergence, cross-entropy minus the target entropy. Heads are
//! built without an output bias, so a softmax head's log-probabilities have
//! rank at most `D + 1`.
//!
//! Flows default to tanh: with ReLU the divergence is piecewise constant in
//! the state, and in three dimensions the fitted Δlogp barely moves.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{kernels, Tape, Tensor};
use crate::cnf::TraceEstimator;
use crate::error::{Error, Result};
use crate::heads::{Head, HeadConfig, HeadKind, MatrixKind, OdeOptions};
use crate::nn::ParamStore;
use crate::ode::{Activation, Method, SolverConfig};
use crate::rank::{numerical_rank, svd, DEFAULT_RANK_TOL};

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckConfig {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub heads: Vec<HeadKind>,
    /// `K` for MoS, `J` for DOC.
    pub components: usize,
    pub flow_hidden: usize,
    /// Flow nonlinearity; `None` uses the head default.
    pub activation: Option<Activation>,
    pub ode: OdeOptions,
    /// Standard deviation of the Gaussian logits behind the target.
    pub target_scale: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub tol: f64,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            n: 20,
            m: 20,
            d: 3,
            heads: vec![HeadKind::Softmax, HeadKind::Mos, HeadKind::Cnf, HeadKind::ContextCnf],
            components: 4,
            flow_hidden: 16,
            activation: Some(Activation::Tanh),
            ode: OdeOptions {
                solver: SolverConfig::fixed(Method::Rk4, 4),
                adjoint: false,
                ..OdeOptions::default()
            },
            target_scale: 0.5,
            steps: 3000,
            lr: 0.03,
            seed: 0,
            tol: DEFAULT_RANK_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadResult {
    pub head: String,
    pub kl_gap: f64,
    /// Numerical rank of the fitted log-probability matrix.
    pub rank: usize,
    /// Rank of the log-density change matrix, for the CNF heads.
    pub delta_rank: Option<usize>,
    pub converged: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BottleneckReport {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub steps: usize,
    pub target_entropy: f64,
    pub target_rank: usize,
    /// Gap of the rank-limited truncated-SVD fit (see [`svd_oracle_gap`]).
    pub oracle_gap: f64,
    pub results: Vec<HeadResult>,
}

impl BottleneckReport {
    pub fn get(&self, head: HeadKind) -> Option<&HeadResult> {
        self.results.iter().find(|r| r.head == head.to_string())
    }

    /// `head,N,M,D,kl_gap,rank`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["head", "N", "M", "D", "kl_gap", "rank"])?;
        for r in &self.results {
            w.write_record([
                r.head.clone(),
                self.n.to_string(),
                self.m.to_string(),
                self.d.to_string(),
                format!("{:.8}", r.kl_gap),
                r.rank.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

fn log_softmax(m: &Tensor) -> Tensor {
    let w = m.shape()[1];
    Tensor::new(m.shape().to_vec(), kernels::log_softmax_rows(m.data(), w)).expect("shape")
}

/// Mean over rows of `KL(exp(a) || exp(b))` for log-probability rows.
pub fn mean_kl(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.shape()[0] as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x.exp() * (x - y))
        .sum::<f64>()
        / n
}

fn mean_entropy(a: &Tensor) -> f64 {
    -a.data().iter().map(|&x| x.exp() * x).sum::<f64>() / a.shape()[0] as f64
}

/// KL gap of `log_softmax(T_d)`, where `T_d` is the rank-`d` truncated SVD
/// of the row-centered target. Row shifts are free under normalization, so
/// this is the best rank-`d + 1` approximation in log space that keeps the
/// constant direction, the structure a bias-free softmax head produces.
/// The truncation is optimal in Frobenius norm, not in KL, so a directly
/// trained head can land somewhat below it.
pub fn svd_oracle_gap(target: &Tensor, d: usize) -> Result<f64> {
    let w = target.shape()[1];
    let centered: Vec<f64> = target
        .rows()
        .flat_map(|r| {
            let mean = r.iter().sum::<f64>() / w as f64;
            r.iter().map(move |x| x - mean)
        })
        .collect();
    let c = Tensor::new(target.shape().to_vec(), centered)?;
    let approx = svd(&c)?.truncated(d);
    Ok(mean_kl(target, &log_softmax(&approx)))
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        self.t += 1;
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = self.m[i].zip_map(&grads[i], |m, g| b1 * m + (1.0 - b1) * g)?;
            self.v[i] = self.v[i].zip_map(&grads[i], |v, g| b2 * v + (1.0 - b2) * g * g)?;
            let step = self.m[i].zip_map(&self.v[i], |m, v| lr * (m / c1) / ((v / c2).sqrt() + eps))?;
            params[i] = params[i].zip_map(&step, |p, s| p - s)?;
        }
        Ok(())
    }
}

fn fit_head(cfg: &BottleneckConfig, kind: HeadKind, target: &Tensor, entropy: f64) -> Result<HeadResult> {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + kind as u64));
    let mut store = ParamStore::new();
    let ctx = store.add("contexts", Tensor::normal([cfg.n, cfg.d], 1.0, &mut rng))?;
    let mut hc = HeadConfig::new(kind, cfg.m, cfg.d);
    hc.components = cfg.components;
    hc.flow_hidden = cfg.flow_hidden;
    hc.activation = cfg.activation;
    hc.ode = cfg.ode;
    hc.trace = TraceEstimator::exact();
    hc.bias = false;
    let head = Head::new(&mut store, hc, None, &mut rng)?;
    let p = target.map(f64::exp);

    let mut params = store.values();
    let mut adam = Adam::new(&params);
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape)?;
        let out = head.forward(&mut tape, &bound, &[bound[ctx]])?;
        let pv = tape.constant(p.clone())?;
        let weighted = tape.mul(out.logp, pv)?;
        let total = tape.sum(weighted)?;
        let loss = tape.scale(total, -1.0 / cfg.n as f64)?;
        let lv = tape.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("{kind} loss")));
        }
        history.push(lv);
        let grads = store.gradients(&bound, &tape.backward(loss)?);
        adam.step(&mut params, &grads, cfg.lr)?;
        store.set_values(&params)?;
    }
    let h = store.get(ctx).clone();
    let logp = crate::rank::assemble_matrix(&head, &store, std::slice::from_ref(&h), MatrixKind::Logp)?;
    let delta_rank = if matches!(kind, HeadKind::Cnf | HeadKind::ContextCnf) {
        let d = crate::rank::assemble_matrix(&head, &store, &[h], MatrixKind::DeltaLogp)?;
        Some(numerical_rank(&d, cfg.tol)?)
    } else {
        None
    };
    let ce = -p.zip_map(&logp, |a, b| a * b)?.sum() / cfg.n as f64;
    let converged = match history.len() {
        0..=9 => false,
        len => {
            let late = history[len - 1];
            let earlier = history[len * 9 / 10];
            (earlier - late).abs() < 1e-4 * late.abs().max(1.0)
        }
    };
    if !converged {
        log::info!("{kind}: loss still moving after {} steps", cfg.steps);
    }
    Ok(HeadResult {
        head: kind.to_string(),
        kl_gap: ce - entropy,
        rank: numerical_rank(&logp, cfg.tol)?,
        delta_rank,
        converged,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains every configured head on one shared target, in parallel.
pub fn bottleneck_experiment(cfg: &BottleneckConfig) -> Result<BottleneckReport> {
    if cfg.n == 0 || cfg.m == 0 || cfg.d == 0 || cfg.heads.is_empty() {
        return Err(Error::Config("bottleneck experiment needs N, M, D >= 1 and at least one head".into()));
    }
    if !(cfg.lr > 0.0) || !(cfg.target_scale > 0.0) {
        return Err(Error::Config("lr and target_scale must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target = log_softmax(&Tensor::normal([cfg.n, cfg.m], cfg.target_scale, &mut rng));
    let entropy = mean_entropy(&target);
    let results = std::thread::scope(|s| {
        let jobs: Vec<_> = cfg
            .heads
            .iter()
            .map(|&k| {
                let target = &target;
                s.spawn(move || fit_head(cfg, k, target, entropy))
            })
            .collect();
        jobs.into_iter()
            .map(|j| j.join().unwrap_or_else(|_| Err(Error::Unsupported("head trial panicked".into()))))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(BottleneckReport {
        n: cfg.n,
        m: cfg.m,
        d: cfg.d,
        steps: cfg.steps,
        target_entropy: entropy,
        target_rank: numerical_rank(&target, cfg.tol)?,
        oracle_gap: svd_oracle_gap(&target, cfg.d)?,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_is_zero_without_bottleneck() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = log_softmax(&Tensor::normal([6, 6], 1.0, &mut rng));
        assert!(svd_oracle_gap(&t, 5).unwrap().abs() < 1e-12);
        assert!(svd_oracle_gap(&t, 2).unwrap() > 1e-3);
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let t = log_softmax(&Tensor::new([2, 3], vec![0.1, 0.2, 0.3, 1.0, -1.0, 0.0]).unwrap());
        assert!(mean_kl(&t, &t).abs() < 1e-16);
    }

    #[test]
    fn no_bottleneck_softmax_fits() {
        let cfg = BottleneckConfig {
            n: 6,
            m: 6,
            d: 6,
            heads: vec![HeadKind::Softmax],
            steps: 1500,
            lr: 0.05,
            ..BottleneckConfig::default()
        };
        let r = bottleneck_experiment(&cfg).unwrap();
        let s = r.get(HeadKind::Softmax).unwrap();
        assert!(s.kl_gap < 1e-3, "{}", s.kl_gap);
        assert_eq!(r.target_rank, 6);
    }
}
