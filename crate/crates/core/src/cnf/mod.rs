//! Continuous normalizing flows.
//!
//! A flow moves points `z` along `dz/dt = f` while a log-density change
//! `Δlogp = ∫ Tr(∂f/∂z) dt` is integrated as one extra coordinate; the
//! density of a transported point is `log p(z1) = log p(z0) - Δlogp`.
//!
//! Points are the rows of the last axis and `f` must act on them
//! independently, so per-point traces can be read off batched VJPs.

mod flow;
mod planar;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::ode::{integrate, SolveStats, SolverConfig, System};

pub use flow::{cnf_on_tape, AugmentedFlow, FlowDynamics, FlowOutput};
pub use planar::{planar_flow, planar_flow_on_tape, planar_reparam_u};

/// Largest dimension accepted by exact traces.
pub const MAX_EXACT_DIM: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Noise {
    Rademacher,
    Gaussian,
}

impl FromStr for Noise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rademacher" => Ok(Noise::Rademacher),
            "gaussian" => Ok(Noise::Gaussian),
            _ => Err(Error::Config(format!("unknown noise {s:?}"))),
        }
    }
}

impl fmt::Display for Noise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Noise::Rademacher => "rademacher",
            Noise::Gaussian => "gaussian",
        })
    }
}

impl Noise {
    pub fn sample<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        match self {
            Noise::Rademacher => {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
                Tensor::new(shape.to_vec(), data).expect("noise shape")
            }
            Noise::Gaussian => Tensor::normal(shape.to_vec(), 1.0, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMode {
    Exact,
    Hutchinson { samples: usize, noise: Noise },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEstimator {
    pub mode: TraceMode,
    pub seed: u64,
}

impl TraceEstimator {
    pub fn exact() -> Self {
        Self {
            mode: TraceMode::Exact,
            seed: 0,
        }
    }

    pub fn hutchinson(samples: usize, noise: Noise, seed: u64) -> Self {
        Self {
            mode: TraceMode::Hutchinson { samples, noise },
            seed,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self.mode {
            TraceMode::Exact if dim > MAX_EXACT_DIM => Err(Error::InvalidArgument(format!(
                "exact trace limited to d <= {MAX_EXACT_DIM}, got {dim}"
            ))),
            TraceMode::Hutchinson { samples: 0, .. } => Err(Error::InvalidArgument("hutchinson needs >= 1 sample".into())),
            _ => Ok(()),
        }
    }

    /// Noise probes for one solve, or none in exact mode.
    pub fn draw(&self, shape: &[usize]) -> Vec<Tensor> {
        match self.mode {
            TraceMode::Exact => Vec::new(),
            TraceMode::Hutchinson { samples, noise } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..samples).map(|_| noise.sample(shape, &mut rng)).collect()
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowState {
    pub z: Tensor,
    /// One entry per point: `∫ Tr(∂f/∂z) dt` along its path.
    pub delta_logp: Tensor,
}

fn point_shape(z: &Tensor) -> Result<Vec<usize>> {
    if z.rank() == 0 {
        return Err(shape_err("divergence", "scalar state"));
    }
    Ok(z.shape()[..z.rank() - 1].to_vec())
}

/// Per-point trace (exact) or its Hutchinson average over the given probes.
pub fn divergence_with(sys: &System, z: &Tensor, t: f64, probes: &[Tensor]) -> Result<Tensor> {
    let pshape = point_shape(z)?;
    let d = z.last_dim();
    let mut tape = Tape::new();
    let zv = tape.param(z.clone())?;
    let pv = sys.params.iter().map(|p| tape.constant(p.clone())).collect::<Result<Vec<_>>>()?;
    let cv = sys.ctx.map(|c| tape.constant(c.clone())).transpose()?;
    let out = sys.f.eval_on_tape(&mut tape, zv, t, cv, &pv)?;
    if tape.shape(out) != z.shape() {
        return Err(shape_err("divergence", format!("state {:?} but derivative {:?}", z.shape(), tape.shape(out))));
    }
    let npoints = z.outer_len();
    let mut acc = vec![0.0; npoints];
    if probes.is_empty() {
        for k in 0..d {
            let mut e = vec![0.0; z.len()];
            for p in 0..npoints {
                e[p * d + k] = 1.0;
            }
            let g = tape.vjp(out, &Tensor::new(z.shape().to_vec(), e)?)?.wrt(zv);
            for (p, a) in acc.iter_mut().enumerate() {
                *a += g.data()[p * d + k];
            }
        }
    } else {
        for eps in probes {
            let g = tape.vjp(out, eps)?.wrt(zv);
            for (p, a) in acc.iter_mut().enumerate() {
                let r = p * d..(p + 1) * d;
                *a += g.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        let s = probes.len() as f64;
        acc.iter_mut().for_each(|a| *a /= s);
    }
    Tensor::new(pshape, acc)
}

/// `Tr(∂f/∂z)` per point, exactly or by Hutchinson's estimator.
pub fn divergence(sys: &System, z: &Tensor, t: f64, est: &TraceEstimator) -> Result<Tensor> {
    est.validate(z.last_dim())?;
    divergence_with(sys, z, t, &est.draw(z.shape()))
}

/// Integrates `z` and `Δlogp` together from `t0` to `t1`. Hutchinson probes
/// are drawn once per solve.
pub fn cnf_integrate(
    sys: &System,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    est: &TraceEstimator,
) -> Result<(FlowState, SolveStats)> {
    est.validate(z0.last_dim())?;
    if !z0.is_finite() {
        return Err(Error::NonFinite("cnf_integrate initial state".into()));
    }
    let pshape = point_shape(z0)?;
    let probes = est.draw(z0.shape());
    let n = z0.len();
    let mut s0 = z0.to_vec();
    s0.resize(n + z0.outer_len(), 0.0);
    let rhs = |t: f64, s: &[f64]| -> Result<Vec<f64>> {
        let z = Tensor::new(z0.shape().to_vec(), s[..n].to_vec())?;
        let mut ds = sys.eval(&z, t)?.to_vec();
        ds.extend_from_slice(divergence_with(sys, &z, t, &probes)?.data());
        Ok(ds)
    };
    let (s, stats) = integrate(rhs, &s0, t0, t1, cfg)?;
    let state = FlowState {
        z: Tensor::new(z0.shape().to_vec(), s[..n].to_vec())?,
        delta_logp: Tensor::new(pshape, s[n..].to_vec())?,
    };
    if !state.delta_logp.is_finite() {
        return Err(Error::NonFinite("delta_logp".into()));
    }
    Ok((state, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Var;
    use crate::ode::{LinearDynamics, Method, OdeDynamics, ZeroDynamics};

    struct TanhField;

    impl OdeDynamics for TanhField {
        fn eval_on_tape(&self, tape: &mut Tape, z: Var, _t: f64, _c: Option<Var>, _p: &[Var]) -> Result<Var> {
            tape.tanh(z)
        }
    }

    #[test]
    fn linear_divergence_is_trace() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.5, -3.0, 1.0], vec![0.0, 4.0, 0.25]]).unwrap();
        let params = [a];
        let sys = System::new(&LinearDynamics, &params);
        let z = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        let div = divergence(&sys, &z, 0.0, &TraceEstimator::exact()).unwrap();
        assert_eq!(div.shape(), &[2]);
        for &v in div.data() {
            assert!((v + 1.75).abs() < 1e-14);
        }
    }

    #[test]
    fn tanh_divergence() {
        let sys = System::new(&TanhField, &[]);
        let z = Tensor::new([1, 3], vec![0.2, -1.0, 2.5]).unwrap();
        let div = divergence(&sys, &z, 0.0, &TraceEstimator::exact()).unwrap();
        let want: f64 = z.data().iter().map(|v| 1.0 - v.tanh().powi(2)).sum();
        assert!((div.data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn zero_flow_is_identity() {
        let sys = System::new(&ZeroDynamics, &[]);
        let z0 = Tensor::new([2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let (st, _) = cnf_integrate(&sys, &z0, 0.0, 1.0, &SolverConfig::default(), &TraceEstimator::exact()).unwrap();
        assert_eq!(st.z, z0);
        assert_eq!(st.delta_logp.data(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_flow_log_density() {
        let a = Tensor::from_rows(&[vec![0.3, -0.2], vec![0.1, -0.5]]).unwrap();
        let params = [a];
        let sys = System::new(&LinearDynamics, &params);
        let z0 = Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 1.0, -2.0, 0.5]).unwrap();
        for cfg in [SolverConfig::fixed(Method::Rk4, 20), SolverConfig::adaptive(1e-8, 1e-10)] {
            let (st, _) = cnf_integrate(&sys, &z0, 0.5, 2.0, &cfg, &TraceEstimator::exact()).unwrap();
            for &v in st.delta_logp.data() {
                assert!((v - (-0.2 * 1.5)).abs() < 1e-6, "{v}");
            }
        }
    }

    #[test]
    fn hutchinson_needs_samples_and_is_seeded() {
        let est = TraceEstimator::hutchinson(0, Noise::Rademacher, 1);
        assert!(est.validate(3).is_err());
        let est = TraceEstimator::hutchinson(3, Noise::Gaussian, 7);
        assert_eq!(est.draw(&[2, 3]), est.draw(&[2, 3]));
        assert!(TraceEstimator::exact().validate(MAX_EXACT_DIM + 1).is_err());
    }
}
