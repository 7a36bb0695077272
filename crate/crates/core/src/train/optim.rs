//! Plain SGD with global-norm clipping, and the non-monotonically triggered
//! averaging schedule layered on top of it.

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// `θ ← θ - γ g`, where `g` is rescaled to norm `clip` if its global norm
/// (over trainable parameters) exceeds it. Returns the norm before clipping.
/// On a non-finite gradient nothing is updated.
pub fn sgd_clip_step(store: &mut ParamStore, grads: &[Tensor], lr: f64, clip: f64) -> Result<f64> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be > 0")));
    }
    if !(clip > 0.0) {
        return Err(Error::InvalidArgument(format!("clip norm {clip} must be > 0")));
    }
    if grads.len() != store.len() {
        return Err(Error::InvalidArgument(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    let trainable: Vec<bool> = store.iter().map(|(_, p)| p.trainable).collect();
    let live: Vec<Tensor> = grads
        .iter()
        .zip(&trainable)
        .filter(|(_, &t)| t)
        .map(|(g, _)| g.clone())
        .collect();
    let norm = global_norm(&live);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let scale = if norm > clip { clip / norm } else { 1.0 };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for ((id, g), t) in ids.into_iter().zip(grads).zip(trainable) {
        if t {
            let next = store.get(id).axpy(-lr * scale, g)?;
            store.set(id, next)?;
        }
    }
    Ok(norm)
}

/// Bookkeeping for NT-ASGD, following the reference pseudocode:
///
/// ```text
/// k, t, T, logs = 0, 0, 0, []
/// loop:
///     SGD step
///     if k mod L == 0 and T == 0:
///         v = validation perplexity
///         if t > n and v > min(logs[t-n..t]): T = k
///         logs.append(v); t += 1
///     k += 1
/// return mean(θ_T, ..., θ_k)
/// ```
///
/// With no trigger the average runs from `θ_0`. The last iterate is kept
/// separately.
#[derive(Clone, Debug)]
pub struct AsgdState {
    interval: usize,
    nonmono: usize,
    k: usize,
    t: usize,
    trigger: usize,
    logs: Vec<f64>,
    sum: Vec<Tensor>,
    last: Vec<Tensor>,
}

impl AsgdState {
    pub fn new(interval: usize, nonmono: usize, theta0: &[Tensor]) -> Result<Self> {
        if interval == 0 || nonmono == 0 {
            return Err(Error::Config(format!("logging interval {interval} and non-monotone interval {nonmono} must be >= 1")));
        }
        Ok(Self {
            interval,
            nonmono,
            k: 0,
            t: 0,
            trigger: 0,
            logs: Vec::new(),
            sum: theta0.to_vec(),
            last: theta0.to_vec(),
        })
    }

    /// The iteration counter `k` of the step in progress.
    pub fn iteration(&self) -> usize {
        self.k
    }

    /// `T`, or `None` before the trigger fired.
    pub fn triggered_at(&self) -> Option<usize> {
        (self.trigger != 0).then_some(self.trigger)
    }

    pub fn logs(&self) -> &[f64] {
        &self.logs
    }

    /// Whether the step just taken is a logging step.
    pub fn needs_eval(&self) -> bool {
        self.k % self.interval == 0 && self.trigger == 0
    }

    /// Records the validation metric of a logging step; returns whether the
    /// trigger fired.
    pub fn record(&mut self, v: f64) -> bool {
        let mut fired = false;
        if self.trigger == 0 && self.t > self.nonmono {
            let min = self.logs[self.t - self.nonmono..self.t].iter().copied().fold(f64::INFINITY, f64::min);
            if v > min {
                self.trigger = self.k;
                self.sum = self.last.clone();
                fired = true;
            }
        }
        self.logs.push(v);
        self.t += 1;
        fired
    }

    /// Closes iteration `k` with the parameters it produced.
    pub fn advance(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.sum.len() {
            return Err(Error::InvalidArgument(format!("{} tensors, state holds {}", params.len(), self.sum.len())));
        }
        for (s, p) in self.sum.iter_mut().zip(params) {
            *s = s.zip_map(p, |a, b| a + b)?;
        }
        self.last = params.to_vec();
        self.k += 1;
        Ok(())
    }

    /// `(1 / (k - T + 1)) Σ_{i=T}^{k} θ_i`.
    pub fn average(&self) -> Vec<Tensor> {
        let n = (self.k - self.trigger + 1) as f64;
        self.sum.iter().map(|s| s.scale(1.0 / n)).collect()
    }

    pub fn last_iterate(&self) -> &[Tensor] {
        &self.last
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[(&str, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.add(*n, Tensor::vector(v.clone())).unwrap();
        }
        s
    }

    #[test]
    fn sgd_examples() {
        let mut s = store(&[("a", vec![1.0, -2.0])]);
        sgd_clip_step(&mut s, &[Tensor::zeros([2])], 0.1, 1.0).unwrap();
        assert_eq!(s.values()[0].data(), &[1.0, -2.0]);

        let mut s = store(&[("a", vec![1.0])]);
        sgd_clip_step(&mut s, &[Tensor::vector(vec![2.0])], 0.5, f64::INFINITY).unwrap();
        assert_eq!(s.values()[0].data(), &[0.0]);

        let mut s = store(&[("a", vec![0.0, 0.0]), ("b", vec![0.0])]);
        let g = [Tensor::vector(vec![6.0, 0.0]), Tensor::vector(vec![8.0])];
        let n = sgd_clip_step(&mut s, &g, 1.0, 1.0).unwrap();
        assert_eq!(n, 10.0);
        assert!((s.values()[0].data()[0] + 0.6).abs() < 1e-15);
        assert!((s.values()[1].data()[0] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_bad_input_and_skips_frozen() {
        let mut s = store(&[("a", vec![1.0]), ("b", vec![1.0])]);
        let bad = [Tensor::vector(vec![f64::NAN]), Tensor::vector(vec![1.0])];
        assert!(matches!(sgd_clip_step(&mut s, &bad, 0.1, 1.0), Err(Error::NonFinite(_))));
        assert_eq!(s.values()[1].data(), &[1.0]);
        assert!(sgd_clip_step(&mut s, &[Tensor::zeros([1]), Tensor::zeros([1])], 0.0, 1.0).is_err());

        s.freeze(&["a".into()]).unwrap();
        let g = [Tensor::vector(vec![100.0]), Tensor::vector(vec![1.0])];
        let n = sgd_clip_step(&mut s, &g, 1.0, 10.0).unwrap();
        assert_eq!(n, 1.0);
        assert_eq!(s.values()[0].data(), &[1.0]);
        assert_eq!(s.values()[1].data(), &[0.0]);
    }

    fn run(vs: &[f64], n: usize) -> AsgdState {
        let mut st = AsgdState::new(1, n, &[Tensor::scalar(0.0)]).unwrap();
        for (i, &v) in vs.iter().enumerate() {
            if st.needs_eval() {
                st.record(v);
            }
            st.advance(&[Tensor::scalar((i + 1) as f64)]).unwrap();
        }
        st
    }

    #[test]
    fn improving_metric_never_triggers() {
        let vs: Vec<f64> = (0..30).map(|i| 100.0 - i as f64).collect();
        let st = run(&vs, 5);
        assert_eq!(st.triggered_at(), None);
        assert_eq!(st.logs().len(), 30);
        // The literal schedule then averages θ_0..θ_30 = 0..30.
        assert_eq!(st.average()[0].item().unwrap(), 15.0);
        assert_eq!(st.last_iterate()[0].item().unwrap(), 30.0);
    }

    #[test]
    fn hand_simulated_trace() {
        // t=0..5 append 5,4,3,3.1,3.2,3.3 (t > 5 fails); at t=6, v=3.4 exceeds
        // min(logs[1..6]) = 3, so T = k = 6 and logging stops.
        let st = run(&[5.0, 4.0, 3.0, 3.1, 3.2, 3.3, 3.4, 3.5], 5);
        assert_eq!(st.triggered_at(), Some(6));
        assert_eq!(st.logs(), &[5.0, 4.0, 3.0, 3.1, 3.2, 3.3, 3.4]);
        // θ_6 = 6, θ_7 = 7, θ_8 = 8.
        assert_eq!(st.average()[0].item().unwrap(), 7.0);
    }

    #[test]
    fn logging_interval() {
        let mut st = AsgdState::new(3, 1, &[Tensor::scalar(0.0)]).unwrap();
        let mut evals = Vec::new();
        for k in 0..10 {
            if st.needs_eval() {
                evals.push(k);
                st.record(1.0);
            }
            st.advance(&[Tensor::scalar(0.0)]).unwrap();
        }
        // Equal values never exceed the window minimum.
        assert_eq!(evals, vec![0, 3, 6, 9]);
        assert!(AsgdState::new(0, 1, &[]).is_err());
    }

    #[test]
    fn constant_parameters_average_to_themselves() {
        let theta = [Tensor::vector(vec![0.25, -3.0]), Tensor::scalar(7.5)];
        let mut st = AsgdState::new(2, 2, &theta).unwrap();
        for v in [3.0, 2.0, 1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 9.0, 1.0, 1.0, 1.0] {
            if st.needs_eval() {
                st.record(v);
            }
            st.advance(&theta).unwrap();
        }
        assert!(st.triggered_at().is_some());
        for (a, b) in st.average().iter().zip(&theta) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }
    }
}
