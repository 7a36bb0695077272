//! Embedding, LSTM stack and a pluggable output head.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::autograd::{Tape, Tensor, Var};
use crate::data::Window;
use crate::error::{Error, Result};
use crate::heads::{Head, HeadConfig, HeadKind};
use crate::nn::{dropout, Bound, Embedding, LstmCell, LstmState, ParamStore};
use crate::sampling::{is_loss_on_tape, UnigramTable};
use crate::train::nll_on_tape;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub emb_dim: usize,
    /// Width of every layer but the last.
    pub hidden: usize,
    pub layers: usize,
    /// Width of the last layer, the context vector fed to the head.
    pub out_dim: usize,
    /// Share the embedding table with the output matrix.
    pub tie: bool,
    /// Dropout on layer outputs (between layers and before the head).
    pub dropout: f64,
    pub dropout_emb: f64,
    /// DropConnect on the hidden-to-hidden weights.
    pub weight_drop: f64,
    /// Head settings; `vocab`, `dim` and `layer_dims` are filled in from the
    /// fields above.
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn new(kind: HeadKind, vocab: usize, dim: usize, layers: usize) -> Self {
        Self {
            vocab,
            emb_dim: dim,
            hidden: dim,
            layers,
            out_dim: dim,
            tie: false,
            dropout: 0.0,
            dropout_emb: 0.0,
            weight_drop: 0.0,
            head: HeadConfig::new(kind, vocab, dim),
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        (0..self.layers)
            .map(|l| if l + 1 == self.layers { self.out_dim } else { self.hidden })
            .collect()
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            vocab: self.vocab,
            dim: self.out_dim,
            layer_dims: self.layer_dims(),
            ..self.head.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.emb_dim == 0 || self.hidden == 0 || self.out_dim == 0 || self.layers == 0 {
            return Err(Error::Config("model sizes must all be >= 1".into()));
        }
        for (name, p) in [("dropout", self.dropout), ("dropout_emb", self.dropout_emb), ("weight_drop", self.weight_drop)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1)")));
            }
        }
        if self.tie && self.emb_dim != self.out_dim {
            return Err(Error::Config(format!(
                "tied embeddings need emb_dim == out_dim ({} vs {})",
                self.emb_dim, self.out_dim
            )));
        }
        self.head_config().validate()
    }
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embedding: Embedding,
    pub cells: Vec<LstmCell>,
    pub head: Head,
}

/// Encoder outputs for one window, rows ordered `b * seq + s`.
pub struct WindowForward {
    /// Every layer's outputs `[B * S, D_n]`; the last is the context.
    pub layers: Vec<Var>,
    pub final_state: LstmState,
}

impl LanguageModel {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let embedding = Embedding::new(&mut store, "embed", cfg.vocab, cfg.emb_dim, cfg.tie, rng)?;
        let mut cells = Vec::with_capacity(cfg.layers);
        let mut input = cfg.emb_dim;
        for (l, &width) in cfg.layer_dims().iter().enumerate() {
            cells.push(LstmCell::new(&mut store, &format!("rnn.{l}"), input, width, cfg.weight_drop, rng)?);
            input = width;
        }
        let tied = cfg.tie.then_some(embedding.table);
        let head = Head::new(&mut store, cfg.head_config(), tied, rng)?;
        Ok(Self {
            cfg,
            store,
            embedding,
            cells,
            head,
        })
    }

    pub fn init_state(&self, batch: usize) -> LstmState {
        LstmState::zeros(&self.cells, batch)
    }

    /// Runs the encoder over `inputs` (one id per strip at each step).
    /// `rng = None` disables every kind of dropout.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: &[Vec<usize>],
        state: &LstmState,
        mut rng: Option<&mut R>,
    ) -> Result<WindowForward> {
        let (cfg, s) = (&self.cfg, inputs.len());
        if s == 0 || state.0.len() != self.cells.len() {
            return Err(Error::InvalidArgument("encode needs at least one step and one state per layer".into()));
        }
        let batch = inputs[0].len();
        let cells = self
            .cells
            .iter()
            .map(|c| c.prepare(tape, bound, rng.as_deref_mut()))
            .collect::<Result<Vec<_>>>()?;
        let mut xs = Vec::with_capacity(s);
        for ids in inputs {
            let x = self.embedding.lookup(tape, bound, ids)?;
            xs.push(dropout(tape, x, cfg.dropout_emb, rng.as_deref_mut())?);
        }
        let init = state
            .0
            .iter()
            .map(|(h, c)| Ok((tape.constant(h.clone())?, tape.constant(c.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        let p = cfg.dropout;
        let un = crate::nn::lstm_unroll(tape, &cells, &xs, &init, |t, h| dropout(t, h, p, rng.as_deref_mut()))?;
        let final_state = LstmState(
            un.final_state
                .iter()
                .map(|&(h, c)| (tape.value(h).clone(), tape.value(c).clone()))
                .collect(),
        );
        let wanted: Vec<usize> = if self.head.cfg.kind == HeadKind::Doc {
            (0..self.cells.len()).collect()
        } else {
            vec![self.cells.len() - 1]
        };
        let mut layers = Vec::with_capacity(wanted.len());
        for l in wanted {
            let steps = &un.layer_outputs[l];
            let mut steps = steps.clone();
            if l + 1 == self.cells.len() {
                steps = steps
                    .into_iter()
                    .map(|h| dropout(tape, h, p, rng.as_deref_mut()))
                    .collect::<Result<_>>()?;
            }
            let width = tape.shape(steps[0])[1];
            let wide = tape.concat(&steps)?;
            layers.push(tape.reshape(wide, [batch * s, width])?);
        }
        Ok(WindowForward { layers, final_state })
    }

    /// Mean loss over the window: full cross-entropy, or the sampled loss
    /// with `k` noise words per position when `sampler` is given.
    pub fn window_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        window: &Window,
        state: &LstmState,
        mut rng: Option<&mut R>,
        sampler: Option<(&UnigramTable, usize)>,
    ) -> Result<(Var, LstmState)> {
        let inputs: Vec<Vec<usize>> = (0..window.seq).map(|s| window.inputs_at(s)).collect();
        let fw = self.encode(tape, bound, &inputs, state, rng.as_deref_mut())?;
        let loss = match (sampler, rng) {
            (Some((q, k)), Some(rng)) => {
                let h = *fw.layers.last().expect("one layer");
                let mut ids = Vec::with_capacity(window.targets.len() * (k + 1));
                let mut log_q = Vec::with_capacity(ids.capacity());
                for &t in &window.targets {
                    let b = q.sampled_batch(t, k, rng)?;
                    ids.extend(b.ids);
                    log_q.extend(b.log_q);
                }
                let logits = self.head.sampled_logits(tape, bound, h, &ids, k + 1)?;
                let lq = Tensor::new([window.targets.len(), k + 1], log_q)?;
                is_loss_on_tape(tape, logits, &lq)?
            }
            _ => {
                let out = self.head.forward(tape, bound, &fw.layers)?;
                nll_on_tape(tape, out.logp, &window.targets)?
            }
        };
        Ok((loss, fw.final_state))
    }

    /// Log-probabilities of the next token for one context per strip.
    pub fn next_logp(&self, ids: &[usize], state: &LstmState) -> Result<(Tensor, LstmState)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape)?;
        let fw = self.encode::<rand::rngs::ThreadRng>(&mut tape, &bound, &[ids.to_vec()], state, None)?;
        let out = self.head.forward(&mut tape, &bound, &fw.layers)?;
        Ok((tape.value(out.logp).clone(), fw.final_state))
    }

    /// Feeds `prompt` and then samples `n` tokens; temperature 0 is greedy.
    pub fn generate<R: Rng + ?Sized>(&self, prompt: &[usize], n: usize, temperature: f64, rng: &mut R) -> Result<Vec<usize>> {
        if !(temperature >= 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be >= 0")));
        }
        let mut state = self.init_state(1);
        let mut logp = Tensor::full([1, self.cfg.vocab], -(self.cfg.vocab as f64).ln());
        for &id in prompt {
            (logp, state) = self.next_logp(&[id], &state)?;
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let row = logp.row(0);
            let next = if temperature == 0.0 {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            } else {
                let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = row.iter().map(|&v| ((v - top) / temperature).exp()).collect();
                WeightedIndex::new(&w)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?
                    .sample(rng)
            };
            out.push(next);
            (logp, state) = self.next_logp(&[next], &state)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check_many;
    use crate::data::batchify;
    use crate::heads::OdeOptions;
    use crate::ode::{Method, SolverConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(kind: HeadKind) -> ModelConfig {
        let mut c = ModelConfig::new(kind, 6, 3, 2);
        c.hidden = 4;
        c.head.components = 2;
        c.head.flow_hidden = 3;
        c.head.ode = OdeOptions {
            solver: SolverConfig::fixed(Method::Rk4, 3),
            adjoint: false,
            ..OdeOptions::default()
        };
        c
    }

    #[test]
    fn every_head_builds_and_normalizes() {
        let ids: Vec<usize> = (0..40).map(|i| (i * 7 + i / 3) % 6).collect();
        let w = batchify(&ids, 2, 4).unwrap().window(0).unwrap();
        for kind in HeadKind::ALL {
            let m = LanguageModel::new(small(kind), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let mut t = Tape::new();
            let b = m.store.bind(&mut t).unwrap();
            let inputs: Vec<Vec<usize>> = (0..4).map(|s| w.inputs_at(s)).collect();
            let fw = m.encode::<ChaCha8Rng>(&mut t, &b, &inputs, &m.init_state(2), None).unwrap();
            assert_eq!(t.shape(*fw.layers.last().unwrap()), &[8, 3]);
            let out = m.head.forward(&mut t, &b, &fw.layers).unwrap();
            for r in t.value(out.logp).rows() {
                assert!((r.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12, "{kind}");
            }
        }
    }

    #[test]
    fn rows_follow_window_layout() {
        // Row b * S + s of the context must come from strip b at step s: feed
        // each strip separately and compare.
        let m = LanguageModel::new(small(HeadKind::Softmax), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ids: Vec<usize> = (0..30).map(|i| (i * 5 + 1) % 6).collect();
        let w = batchify(&ids, 3, 4).unwrap().window(1).unwrap();
        let mut t = Tape::new();
        let b = m.store.bind(&mut t).unwrap();
        let inputs: Vec<Vec<usize>> = (0..4).map(|s| w.inputs_at(s)).collect();
        let fw = m.encode::<ChaCha8Rng>(&mut t, &b, &inputs, &m.init_state(3), None).unwrap();
        let all = t.value(fw.layers[0]).clone();
        for strip in 0..3 {
            let one: Vec<Vec<usize>> = (0..4).map(|s| vec![w.inputs[strip * 4 + s]]).collect();
            let f1 = m.encode::<ChaCha8Rng>(&mut t, &b, &one, &m.init_state(1), None).unwrap();
            let v = t.value(f1.layers[0]);
            for s in 0..4 {
                let got = all.row(strip * 4 + s);
                assert!(got.iter().zip(v.row(s)).all(|(a, b)| (a - b).abs() < 1e-14));
            }
        }
    }

    #[test]
    fn tied_model_shares_the_table() {
        let mut c = small(HeadKind::Softmax);
        c.tie = true;
        let m = LanguageModel::new(c.clone(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(m.head.output, m.embedding.table);
        assert!(m.store.id("head.out.weight").is_none());
        c.emb_dim = 5;
        assert!(matches!(LanguageModel::new(c, &mut ChaCha8Rng::seed_from_u64(2)), Err(Error::Config(_))));
    }

    #[test]
    fn window_loss_gradients() {
        let ids: Vec<usize> = (0..30).map(|i| (i * 5 + 2) % 6).collect();
        let w = batchify(&ids, 2, 3).unwrap().window(0).unwrap();
        for kind in [HeadKind::Softmax, HeadKind::Cnf, HeadKind::Doc] {
            let m = LanguageModel::new(small(kind), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let values = m.store.values();
            let err = grad_check_many(
                |t, vars| {
                    let b = Bound::from_vars(vars.to_vec());
                    Ok(m.window_loss::<ChaCha8Rng>(t, &b, &w, &m.init_state(2), None, None)?.0)
                },
                &values,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{kind}: {err}");
        }
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let m = LanguageModel::new(small(HeadKind::Softmax), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let a = m.generate(&[1, 2], 10, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = m.generate(&[1, 2], 10, 0.0, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
        let c = m.generate(&[1, 2], 10, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let d = m.generate(&[1, 2], 10, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(c, d);
        assert!(c.iter().all(|&i| i < 6));
    }
}
