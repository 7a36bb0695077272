//! Planar flow `z' = z + u tanh(wᵀz + b)`.
//!
//! Its Jacobian `I + u ψᵀ` with `ψ = tanh'(wᵀz + b) w` has determinant
//! `1 + ψᵀu` by the matrix determinant lemma.

use crate::autograd::{kernels, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Adjusts `u` so that `wᵀu >= -1`, which makes the map invertible:
/// `û = u + (m(wᵀu) - wᵀu) w / |w|²` with `m(x) = -1 + softplus(x)`.
pub fn planar_reparam_u(u: &Tensor, w: &Tensor) -> Result<Tensor> {
    let wu = w.dot(u)?;
    let ww = w.dot(w)?;
    if ww == 0.0 {
        return Ok(u.clone());
    }
    let m = -1.0 + kernels::softplus(wu);
    u.axpy((m - wu) / ww, w)
}

/// Applies the flow to every point (last axis) of `z`; returns the moved
/// points and `log|det ∂z'/∂z|` per point. `u` is used as given and must
/// satisfy `uᵀw >= -1` (see [`planar_reparam_u`]).
pub fn planar_flow(z: &Tensor, u: &Tensor, w: &Tensor, b: f64) -> Result<(Tensor, Tensor)> {
    let d = z.last_dim();
    if z.rank() == 0 || u.shape() != [d] || w.shape() != [d] {
        return Err(shape_err("planar_flow", format!("z {:?}, u {:?}, w {:?}", z.shape(), u.shape(), w.shape())));
    }
    let uw = u.dot(w)?;
    if uw < -1.0 {
        return Err(Error::InvalidArgument(format!("planar flow not invertible: uᵀw = {uw} < -1")));
    }
    let mut out = Vec::with_capacity(z.len());
    let mut logdet = Vec::with_capacity(z.outer_len());
    for row in z.rows() {
        let a: f64 = row.iter().zip(w.data()).map(|(x, y)| x * y).sum::<f64>() + b;
        let th = a.tanh();
        out.extend(row.iter().zip(u.data()).map(|(x, ui)| x + ui * th));
        let det = 1.0 + (1.0 - th * th) * uw;
        if det.abs() < 1e-15 {
            return Err(Error::Degenerate(det));
        }
        logdet.push(det.abs().ln());
    }
    Ok((
        Tensor::new(z.shape().to_vec(), out)?,
        Tensor::new(z.shape()[..z.rank() - 1].to_vec(), logdet)?,
    ))
}

/// The same map on the tape, `z: [.., d]`, `u, w: [d]`.
pub fn planar_flow_on_tape(tape: &mut Tape, z: Var, u: Var, w: Var, b: f64) -> Result<Var> {
    let zw = tape.mul(z, w)?;
    let a = tape.sum_last(zw)?;
    let a = tape.add_scalar(a, b)?;
    let h = tape.tanh(a)?;
    let d = tape.shape(u)[0];
    let h = tape.expand(h, d)?;
    let uh = tape.mul(h, u)?;
    tape.add(z, uh)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_u_is_identity() {
        let z = Tensor::new([2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let (z2, ld) = planar_flow(&z, &Tensor::zeros([2]), &Tensor::vector(vec![1.0, -1.0]), 0.3).unwrap();
        assert_eq!(z2, z);
        assert_eq!(ld.data(), &[0.0, 0.0]);
    }

    #[test]
    fn one_dimensional_case() {
        let one = Tensor::vector(vec![1.0]);
        let (z2, ld) = planar_flow(&Tensor::new([1, 1], vec![0.0]).unwrap(), &one, &one, 0.0).unwrap();
        assert_eq!(z2.data(), &[0.0]);
        assert!((ld.data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn reparam_enforces_invertibility() {
        let u = Tensor::vector(vec![-3.0, 1.0]);
        let w = Tensor::vector(vec![2.0, 0.5]);
        assert!(planar_flow(&Tensor::zeros([1, 2]), &u, &w, 0.0).is_err());
        let uh = planar_reparam_u(&u, &w).unwrap();
        assert!(uh.dot(&w).unwrap() >= -1.0);
        assert!(planar_flow(&Tensor::zeros([1, 2]), &uh, &w, 0.0).is_ok());
    }

    #[test]
    fn degenerate_determinant() {
        let u = Tensor::vector(vec![-1.0]);
        let w = Tensor::vector(vec![1.0]);
        assert!(matches!(
            planar_flow(&Tensor::new([1, 1], vec![0.0]).unwrap(), &u, &w, 0.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn tape_version_agrees() {
        let z = Tensor::new([2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap();
        let u = Tensor::vector(vec![0.5, -0.2, 0.1]);
        let w = Tensor::vector(vec![1.0, 0.3, -0.7]);
        let (z2, _) = planar_flow(&z, &u, &w, 0.25).unwrap();
        let mut t = Tape::new();
        let (zv, uv, wv) = (t.constant(z).unwrap(), t.constant(u).unwrap(), t.constant(w).unwrap());
        let out = planar_flow_on_tape(&mut t, zv, uv, wv, 0.25).unwrap();
        assert!(t.value(out).max_abs_diff(&z2) < 1e-15);
    }
}
