//! Solver cores over flat `f64` state vectors.
//!
//! The right-hand side is any `FnMut(t, z) -> dz/dt`. Tensor-level wrappers
//! live in the parent module.

use crate::error::{Error, Result};
use crate::ode::{Method, SolveStats, SolverConfig};

fn axpy_into(out: &mut Vec<f64>, z: &[f64], terms: &[(f64, &[f64])]) {
    out.clear();
    out.extend_from_slice(z);
    for &(c, k) in terms {
        if c != 0.0 {
            for (o, &v) in out.iter_mut().zip(k) {
                *o += c * v;
            }
        }
    }
}

fn check_finite(z: &[f64], t: f64) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("ODE state at t={t}")))
    }
}

struct Counter<'a, F> {
    f: &'a mut F,
    evals: usize,
    max: usize,
}

impl<F> Counter<'_, F>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    fn call(&mut self, t: f64, z: &[f64]) -> Result<Vec<f64>> {
        if self.evals >= self.max {
            return Err(Error::MaxEvals(self.max));
        }
        self.evals += 1;
        let dz = (self.f)(t, z)?;
        if dz.len() != z.len() {
            return Err(Error::Shape {
                op: "ode rhs",
                detail: format!("state has {} values, derivative {}", z.len(), dz.len()),
            });
        }
        Ok(dz)
    }
}

/// Fixed-step integration with `cfg.steps` equal steps from `t0` to `t1`.
pub fn integrate_fixed<F>(mut f: F, z0: &[f64], t0: f64, t1: f64, cfg: &SolverConfig) -> Result<(Vec<f64>, SolveStats)>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut rhs = Counter {
        f: &mut f,
        evals: 0,
        max: cfg.max_evals,
    };
    let mut z = z0.to_vec();
    let mut stats = SolveStats::default();
    if t0 == t1 {
        return Ok((z, stats));
    }
    let n = cfg.steps;
    let h = (t1 - t0) / n as f64;
    let mut tmp = Vec::with_capacity(z.len());
    for s in 0..n {
        let t = t0 + s as f64 * h;
        match cfg.method {
            Method::Euler => {
                let k1 = rhs.call(t, &z)?;
                axpy_into(&mut tmp, &z, &[(h, &k1)]);
            }
            Method::Midpoint => {
                let k1 = rhs.call(t, &z)?;
                axpy_into(&mut tmp, &z, &[(0.5 * h, &k1)]);
                let k2 = rhs.call(t + 0.5 * h, &tmp)?;
                axpy_into(&mut tmp, &z, &[(h, &k2)]);
            }
            Method::Rk4 => {
                let k1 = rhs.call(t, &z)?;
                axpy_into(&mut tmp, &z, &[(0.5 * h, &k1)]);
                let k2 = rhs.call(t + 0.5 * h, &tmp)?;
                axpy_into(&mut tmp, &z, &[(0.5 * h, &k2)]);
                let k3 = rhs.call(t + 0.5 * h, &tmp)?;
                axpy_into(&mut tmp, &z, &[(h, &k3)]);
                let k4 = rhs.call(t + h, &tmp)?;
                axpy_into(
                    &mut tmp,
                    &z,
                    &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)],
                );
            }
            Method::Dopri5 => {
                return Err(Error::InvalidArgument("dopri5 is adaptive; use integrate_adaptive".into()))
            }
        }
        std::mem::swap(&mut z, &mut tmp);
        check_finite(&z, t + h)?;
        stats.accepted += 1;
    }
    stats.evals = rhs.evals;
    Ok((z, stats))
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
// B5 - B4.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn rms_scaled(v: &[f64], z: &[f64], z2: Option<&[f64]>, cfg: &SolverConfig) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let s: f64 = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mag = match z2 {
                Some(w) => z[i].abs().max(w[i].abs()),
                None => z[i].abs(),
            };
            let r = x / (cfg.atol + cfg.rtol * mag);
            r * r
        })
        .sum();
    (s / v.len() as f64).sqrt()
}

/// Adaptive Dormand-Prince 5(4) with error control in the RMS norm weighted
/// by `atol + rtol * |z|`.
pub fn integrate_adaptive<F>(mut f: F, z0: &[f64], t0: f64, t1: f64, cfg: &SolverConfig) -> Result<(Vec<f64>, SolveStats)>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut rhs = Counter {
        f: &mut f,
        evals: 0,
        max: cfg.max_evals,
    };
    let mut stats = SolveStats::default();
    let mut z = z0.to_vec();
    if t0 == t1 {
        return Ok((z, stats));
    }
    let span = (t1 - t0).abs();
    let dir = (t1 - t0).signum();
    let min_h = 1e-12 * span;

    let mut k1 = rhs.call(t0, &z)?;

    // Initial step: the usual two-evaluation heuristic, capped at a tenth of
    // the interval.
    let d0 = rms_scaled(&z, &z, None, cfg);
    let d1 = rms_scaled(&k1, &z, None, cfg);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let mut tmp = Vec::with_capacity(z.len());
    axpy_into(&mut tmp, &z, &[(dir * h0, &k1)]);
    let f1 = rhs.call(t0 + dir * h0, &tmp)?;
    let diff: Vec<f64> = f1.iter().zip(&k1).map(|(a, b)| a - b).collect();
    let d2 = rms_scaled(&diff, &z, None, cfg) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    let mut h = (100.0 * h0).min(h1).min(span / 10.0);

    let mut t = t0;
    let mut stages: Vec<Vec<f64>> = Vec::with_capacity(7);
    while (t1 - t) * dir > 0.0 {
        if h < min_h {
            return Err(Error::StepUnderflow { t, h });
        }
        let last = (t1 - t).abs() <= h * (1.0 + 1e-12);
        let step = if last { t1 - t } else { dir * h };

        stages.clear();
        stages.push(k1.clone());
        let rows: [&[f64]; 5] = [&A2, &A3, &A4, &A5, &A6];
        for (s, a) in rows.iter().enumerate() {
            let terms: Vec<(f64, &[f64])> = a.iter().zip(&stages).map(|(&c, k)| (step * c, k.as_slice())).collect();
            axpy_into(&mut tmp, &z, &terms);
            let k = rhs.call(t + C[s + 1] * step, &tmp)?;
            stages.push(k);
        }
        let terms: Vec<(f64, &[f64])> = B5.iter().zip(&stages).map(|(&c, k)| (step * c, k.as_slice())).collect();
        let mut z_new = Vec::with_capacity(z.len());
        axpy_into(&mut z_new, &z, &terms);
        let t_new = if last { t1 } else { t + step };
        let k7 = rhs.call(t_new, &z_new)?;
        stages.push(k7);

        let mut err = vec![0.0; z.len()];
        for (e, k) in E.iter().zip(&stages) {
            for (o, &v) in err.iter_mut().zip(k) {
                *o += step * e * v;
            }
        }
        let en = rms_scaled(&err, &z, Some(&z_new), cfg);
        if !en.is_finite() {
            return Err(Error::NonFinite(format!("error estimate at t={t}")));
        }
        let factor = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
        if en <= 1.0 {
            check_finite(&z_new, t_new)?;
            z = z_new;
            t = t_new;
            k1 = stages.pop().expect("seven stages");
            stats.accepted += 1;
        } else {
            stats.rejected += 1;
        }
        h *= factor;
    }
    stats.evals = rhs.evals;
    Ok((z, stats))
}

/// Dispatches on `cfg.method`.
pub fn integrate<F>(f: F, z0: &[f64], t0: f64, t1: f64, cfg: &SolverConfig) -> Result<(Vec<f64>, SolveStats)>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    match cfg.method {
        Method::Dopri5 => integrate_adaptive(f, z0, t0, t1, cfg),
        _ => integrate_fixed(f, z0, t0, t1, cfg),
    }
}
