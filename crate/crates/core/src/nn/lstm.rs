//! LSTM cells and multi-layer stacks.
//!
//! Gate order inside the `4g` blocks is (input, forget, cell, output):
//!
//! ```text
//! [i f g o] = W_ih x + W_hh h + b
//! c' = sigmoid(f) * c + sigmoid(i) * tanh(g)
//! h' = sigmoid(o) * tanh(c')
//! ```

use rand::Rng;

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{check_last_dim, init_fan_in, weight_drop};
use crate::nn::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
    /// DropConnect probability on `w_hh`.
    pub weight_drop: f64,
}

/// Tape handles of one cell's weights for a single forward pass, with the
/// DropConnect mask already applied to `w_hh`.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        weight_drop: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight_drop) {
            return Err(Error::InvalidArgument(format!("weight_drop {weight_drop} outside [0, 1]")));
        }
        let g4 = 4 * hidden;
        Ok(Self {
            w_ih: store.add(format!("{name}.w_ih"), init_fan_in([g4, input], input, rng))?,
            w_hh: store.add(format!("{name}.w_hh"), init_fan_in([g4, hidden], hidden, rng))?,
            bias: store.add(format!("{name}.bias"), init_fan_in([g4], hidden, rng))?,
            input,
            hidden,
            weight_drop,
        })
    }

    /// Binds the weights for one forward pass. The DropConnect mask is drawn
    /// here, once, and shared by every time step.
    pub fn prepare<R: Rng + ?Sized>(&self, tape: &mut Tape, bound: &Bound, rng: Option<&mut R>) -> Result<CellVars> {
        Ok(CellVars {
            w_ih: bound[self.w_ih],
            w_hh: weight_drop(tape, bound[self.w_hh], self.weight_drop, rng)?,
            bias: bound[self.bias],
            hidden: self.hidden,
        })
    }
}

/// One LSTM step on a batch `x: [B, in]`, `h, c: [B, g]`.
pub fn lstm_step(tape: &mut Tape, cell: &CellVars, x: Var, state: (Var, Var)) -> Result<(Var, Var)> {
    let (h, c) = state;
    let g = cell.hidden;
    check_last_dim("lstm_step", tape, h, g)?;
    check_last_dim("lstm_step", tape, c, g)?;
    let a = tape.matmul_t(x, cell.w_ih)?;
    let r = tape.matmul_t(h, cell.w_hh)?;
    let z = tape.add(a, r)?;
    let z = tape.add(z, cell.bias)?;
    let zi = tape.slice(z, 0, g)?;
    let zf = tape.slice(z, g, 2 * g)?;
    let zg = tape.slice(z, 2 * g, 3 * g)?;
    let zo = tape.slice(z, 3 * g, 4 * g)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let gg = tape.tanh(zg)?;
    let o = tape.sigmoid(zo)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, gg)?;
    let c2 = tape.add(fc, ig)?;
    let tc = tape.tanh(c2)?;
    let h2 = tape.mul(o, tc)?;
    Ok((h2, c2))
}

/// Recurrent state of a stack: one `(h, c)` value pair per layer.
#[derive(Clone, Debug)]
pub struct LstmState(pub Vec<(Tensor, Tensor)>);

impl LstmState {
    pub fn zeros(layers: &[LstmCell], batch: usize) -> Self {
        Self(
            layers
                .iter()
                .map(|l| (Tensor::zeros([batch, l.hidden]), Tensor::zeros([batch, l.hidden])))
                .collect(),
        )
    }
}

/// Output of [`lstm_unroll`]: the last layer's hidden states per step, every
/// layer's hidden states per step, and the final state of each layer.
pub struct Unrolled {
    pub outputs: Vec<Var>,
    pub layer_outputs: Vec<Vec<Var>>,
    pub final_state: Vec<(Var, Var)>,
}

/// Runs a stack over `inputs` (one `[B, in]` var per step). `between` is
/// applied to each layer's outputs before they feed the next layer.
pub fn lstm_unroll(
    tape: &mut Tape,
    cells: &[CellVars],
    inputs: &[Var],
    init: &[(Var, Var)],
    mut between: impl FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<Unrolled> {
    if cells.len() != init.len() {
        return Err(Error::InvalidArgument(format!("{} cells, {} initial states", cells.len(), init.len())));
    }
    let mut xs = inputs.to_vec();
    let mut layer_outputs = Vec::with_capacity(cells.len());
    let mut final_state = Vec::with_capacity(cells.len());
    for (l, cell) in cells.iter().enumerate() {
        let mut state = init[l];
        let mut hs = Vec::with_capacity(xs.len());
        for &x in &xs {
            state = lstm_step(tape, cell, x, state)?;
            hs.push(state.0);
        }
        final_state.push(state);
        layer_outputs.push(hs.clone());
        xs = if l + 1 < cells.len() {
            hs.into_iter().map(|h| between(tape, h)).collect::<Result<_>>()?
        } else {
            hs
        };
    }
    Ok(Unrolled {
        outputs: xs,
        layer_outputs,
        final_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell_from(t: &mut Tape, w_ih: &Tensor, w_hh: &Tensor, b: &Tensor, g: usize) -> CellVars {
        CellVars {
            w_ih: t.constant(w_ih.clone()).unwrap(),
            w_hh: t.constant(w_hh.clone()).unwrap(),
            bias: t.constant(b.clone()).unwrap(),
            hidden: g,
        }
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let (i, g) = (3, 2);
        let mut t = Tape::new();
        let cell = cell_from(&mut t, &Tensor::zeros([4 * g, i]), &Tensor::zeros([4 * g, g]), &Tensor::zeros([4 * g]), g);
        let x = t.constant(Tensor::ones([1, i])).unwrap();
        let h = t.constant(Tensor::zeros([1, g])).unwrap();
        let c = t.constant(Tensor::zeros([1, g])).unwrap();
        let (h2, c2) = lstm_step(&mut t, &cell, x, (h, c)).unwrap();
        assert_eq!(t.value(h2).data(), &[0.0, 0.0]);
        assert_eq!(t.value(c2).data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_copies_cell() {
        let (i, g) = (2, 3);
        let mut b = vec![-30.0; 4 * g];
        for v in &mut b[g..2 * g] {
            *v = 30.0;
        }
        let mut t = Tape::new();
        let cell = cell_from(&mut t, &Tensor::zeros([4 * g, i]), &Tensor::zeros([4 * g, g]), &Tensor::vector(b), g);
        let x = t.constant(Tensor::ones([1, i])).unwrap();
        let h = t.constant(Tensor::zeros([1, g])).unwrap();
        let c0 = Tensor::new([1, g], vec![0.7, -1.2, 3.0]).unwrap();
        let c = t.constant(c0.clone()).unwrap();
        let (_, c2) = lstm_step(&mut t, &cell, x, (h, c)).unwrap();
        assert!(t.value(c2).max_abs_diff(&c0) < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let cell = cell_from(&mut t, &Tensor::zeros([8, 3]), &Tensor::zeros([8, 2]), &Tensor::zeros([8]), 2);
        let x = t.constant(Tensor::ones([1, 4])).unwrap();
        let h = t.constant(Tensor::zeros([1, 2])).unwrap();
        let c = t.constant(Tensor::zeros([1, 2])).unwrap();
        assert!(lstm_step(&mut t, &cell, x, (h, c)).is_err());
        let h3 = t.constant(Tensor::zeros([1, 3])).unwrap();
        let x3 = t.constant(Tensor::ones([1, 3])).unwrap();
        assert!(lstm_step(&mut t, &cell, x3, (h3, c)).is_err());
    }

    #[test]
    fn three_step_gradients() {
        let (i, g, b) = (3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = vec![
            Tensor::normal([4 * g, i], 0.5, &mut rng),
            Tensor::normal([4 * g, g], 0.5, &mut rng),
            Tensor::normal([4 * g], 0.5, &mut rng),
            Tensor::normal([b, i], 1.0, &mut rng),
            Tensor::normal([b, g], 0.5, &mut rng),
            Tensor::normal([b, g], 0.5, &mut rng),
        ];
        let err = grad_check_many(
            |t, v| {
                let cell = CellVars {
                    w_ih: v[0],
                    w_hh: v[1],
                    bias: v[2],
                    hidden: g,
                };
                let mut s = (v[4], v[5]);
                for _ in 0..3 {
                    s = lstm_step(t, &cell, v[3], s)?;
                }
                let hc = t.mul(s.0, s.1)?;
                t.sum(hc)
            },
            &pts,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn unroll_stacks_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        let l0 = LstmCell::new(&mut ps, "l0", 3, 4, 0.0, &mut rng).unwrap();
        let l1 = LstmCell::new(&mut ps, "l1", 4, 5, 0.0, &mut rng).unwrap();
        let mut t = Tape::new();
        let bound = ps.bind(&mut t).unwrap();
        let cells = vec![
            l0.prepare::<ChaCha8Rng>(&mut t, &bound, None).unwrap(),
            l1.prepare::<ChaCha8Rng>(&mut t, &bound, None).unwrap(),
        ];
        let init_state = LstmState::zeros(&[l0, l1], 2);
        let init: Vec<_> = init_state
            .0
            .iter()
            .map(|(h, c)| (t.constant(h.clone()).unwrap(), t.constant(c.clone()).unwrap()))
            .collect();
        let xs: Vec<_> = (0..4).map(|_| t.constant(Tensor::normal([2, 3], 1.0, &mut rng)).unwrap()).collect();
        let out = lstm_unroll(&mut t, &cells, &xs, &init, |_, h| Ok(h)).unwrap();
        assert_eq!(out.outputs.len(), 4);
        assert_eq!(t.shape(out.outputs[3]), &[2, 5]);
        assert_eq!(out.final_state[1].0, out.outputs[3]);
        for &h in &out.outputs {
            assert!(t.value(h).data().iter().all(|v| v.abs() < 1.0));
        }
    }
}
