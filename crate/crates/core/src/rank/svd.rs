//! One-sided (Hestenes) Jacobi SVD.

use crate::autograd::Tensor;
use crate::error::{shape_err, Error, Result};

/// `A = U diag(s) Vᵀ` with `U: [m, r]`, `V: [n, r]`, `r = min(m, n)`, and
/// `s` sorted descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

const MAX_SWEEPS: usize = 80;

// Orthogonalizes the columns of a tall `m x n` matrix given column-major.
fn hestenes(mut cols: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let n = cols.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut cols, &mut v] {
                    let (lo, hi) = m.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (a, b) = (*x, *y);
                        *x = c * a - s * b;
                        *y = s * a + c * b;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    for (c, &s) in cols.iter_mut().zip(&sv) {
        if s > 0.0 {
            c.iter_mut().for_each(|x| *x /= s);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let u = order.iter().map(|&j| cols[j].clone()).collect();
    let vv = order.iter().map(|&j| v[j].clone()).collect();
    sv = order.iter().map(|&j| sv[j]).collect();
    (u, sv, vv)
}

fn from_columns(cols: &[Vec<f64>], rows: usize) -> Tensor {
    let k = cols.len();
    let mut data = vec![0.0; rows * k];
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            data[i * k + j] = x;
        }
    }
    Tensor::new([rows, k], data).expect("shape")
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    if a.rank() != 2 || a.is_empty() {
        return Err(shape_err("svd", format!("need a non-empty matrix, got {:?}", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let tall = m >= n;
    let (rows, cols) = if tall { (m, n) } else { (n, m) };
    let columns: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| if tall { a.at(&[i, j]) } else { a.at(&[j, i]) }).collect())
        .collect();
    let (u, s, v) = hestenes(columns);
    let (u, v) = (from_columns(&u, rows), from_columns(&v, cols));
    Ok(if tall { Svd { u, s, v } } else { Svd { u: v, s, v: u } })
}

pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    Ok(svd(a)?.s)
}

/// Number of singular values above `tol * σ_max`.
pub fn numerical_rank(a: &Tensor, tol: f64) -> Result<usize> {
    let s = singular_values(a)?;
    let cut = tol * s.first().copied().unwrap_or(0.0);
    Ok(s.iter().filter(|&&x| x > cut).count())
}

impl Svd {
    /// `U_k diag(s_k) V_kᵀ` from the `k` leading triplets.
    pub fn truncated(&self, k: usize) -> Tensor {
        let (m, n) = (self.u.shape()[0], self.v.shape()[0]);
        let k = k.min(self.s.len());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = (0..k).map(|r| self.u.at(&[i, r]) * self.s[r] * self.v.at(&[j, r])).sum();
            }
        }
        Tensor::new([m, n], data).expect("shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matmul_t(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        let mut d = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                d[i * n + j] = (0..k).map(|r| a.at(&[i, r]) * b.at(&[j, r])).sum();
            }
        }
        Tensor::new([m, n], d).unwrap()
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (m, n) in [(5, 5), (7, 3), (3, 8), (1, 4), (20, 20)] {
            let a = Tensor::normal([m, n], 1.0, &mut rng);
            let d = svd(&a).unwrap();
            let rec = d.truncated(m.min(n));
            let err = rec.zip_map(&a, |x, y| x - y).unwrap().norm() / a.norm();
            assert!(err < 1e-12, "{m}x{n}: {err}");
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]) && d.s.iter().all(|&s| s >= 0.0));
            let utu = matmul_t(&d.u.transpose().unwrap(), &d.u.transpose().unwrap());
            assert!(utu.max_abs_diff(&Tensor::eye(m.min(n))) < 1e-12);
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&Tensor::eye(5), 1e-8).unwrap(), 5);
        let u = Tensor::new([4, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let v = Tensor::new([6, 1], vec![0.3, 1.0, -1.0, 2.0, 0.0, 4.0]).unwrap();
        assert_eq!(numerical_rank(&matmul_t(&u, &v), 1e-8).unwrap(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::normal([20, 3], 1.0, &mut rng);
        let e = Tensor::normal([20, 3], 1.0, &mut rng);
        assert_eq!(numerical_rank(&matmul_t(&h, &e), 1e-8).unwrap(), 3);
        assert_eq!(numerical_rank(&Tensor::zeros([3, 3]), 1e-8).unwrap(), 0);
        assert!(svd(&Tensor::full([2, 2], f64::NAN)).is_err());
    }

    #[test]
    fn agrees_with_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::normal([9, 6], 1.0, &mut rng);
        let ours = singular_values(&a).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(9, 6, a.data());
        let mut theirs: Vec<f64> = m.singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        for (x, y) in ours.iter().zip(&theirs) {
            assert!((x - y).abs() < 1e-12 * theirs[0]);
        }
    }
}
