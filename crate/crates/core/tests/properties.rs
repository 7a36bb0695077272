use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cnflm::data::{tokenize, Corpus, Mode, Preprocess, Vocab};
use cnflm::heads::{Head, HeadConfig, HeadKind, OdeOptions};
use cnflm::nn::ParamStore;
use cnflm::ode::{Method, SolverConfig};
use cnflm::rank::{numerical_rank, svd};
use cnflm::sampling::is_loss;
use cnflm::train::metrics;
use cnflm::{Tape, Tensor};

fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut d = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            d[i * n + j] = (0..k).map(|r| a.at(&[i, r]) * b.at(&[r, j])).sum();
        }
    }
    Tensor::new([m, n], d).unwrap()
}

fn low_rank(m: usize, n: usize, r: usize, rng: &mut ChaCha8Rng) -> Tensor {
    matmul(&Tensor::normal([m, r], 1.0, rng), &Tensor::normal([r, n], 1.0, rng))
}

const RANK_TOL: f64 = 1e-8;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_softmax_is_shift_invariant(x in prop::collection::vec(-30.0f64..30.0, 1..12), c in -100.0f64..100.0) {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(x.clone())).unwrap();
        let b = t.constant(Tensor::vector(x.iter().map(|v| v + c).collect())).unwrap();
        let (la, lb) = (t.log_softmax(a).unwrap(), t.log_softmax(b).unwrap());
        prop_assert!(t.value(la).max_abs_diff(t.value(lb)) <= 1e-12);
        prop_assert!(logsumexp(t.value(la).data()).abs() <= 1e-12);
    }

    // y = sum(exp(tanh(x))), dy/dx = exp(tanh x) (1 - tanh² x).
    #[test]
    fn chain_rule_matches_hand_jacobian(x in prop::collection::vec(-3.0f64..3.0, 1..10)) {
        let mut t = Tape::new();
        let v = t.param(Tensor::vector(x.clone())).unwrap();
        let th = t.tanh(v).unwrap();
        let e = t.exp(th).unwrap();
        let y = t.sum(e).unwrap();
        let g = t.backward(y).unwrap().wrt(v);
        for (gi, xi) in g.data().iter().zip(&x) {
            let want = xi.tanh().exp() * (1.0 - xi.tanh().powi(2));
            prop_assert!((gi - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    // y = sum(w ⊙ sigmoid(a x)), dy/dx = w σ'(a x) a.
    #[test]
    fn chain_rule_through_scale_and_sigmoid(x in prop::collection::vec(-4.0f64..4.0, 1..10), a in -2.0f64..2.0, seed in any::<u64>()) {
        let w = Tensor::normal([x.len()], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut t = Tape::new();
        let v = t.param(Tensor::vector(x.clone())).unwrap();
        let s = t.scale(v, a).unwrap();
        let sg = t.sigmoid(s).unwrap();
        let wv = t.constant(w.clone()).unwrap();
        let p = t.mul(sg, wv).unwrap();
        let y = t.sum(p).unwrap();
        let g = t.backward(y).unwrap().wrt(v);
        for i in 0..x.len() {
            let sig = 1.0 / (1.0 + (-a * x[i]).exp());
            let want = w.data()[i] * sig * (1.0 - sig) * a;
            prop_assert!((g.data()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn is_loss_is_shift_invariant(
        logits in prop::collection::vec(-10.0f64..10.0, 2..16),
        c in -50.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let log_q: Vec<f64> = Tensor::uniform([logits.len()], -6.0, -0.1, &mut ChaCha8Rng::seed_from_u64(seed)).to_vec();
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        let a = is_loss(&logits, &log_q).unwrap();
        let b = is_loss(&shifted, &log_q).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    // With the target's corrected logit ahead of every noise word by at
    // least m, the loss is below log(1 + k e^{-m}).
    #[test]
    fn is_loss_margin_bound(k in 1usize..20, m in 0.01f64..8.0, gaps in prop::collection::vec(0.0f64..5.0, 20), seed in any::<u64>()) {
        let log_q: Vec<f64> = Tensor::uniform([k + 1], -6.0, -0.1, &mut ChaCha8Rng::seed_from_u64(seed)).to_vec();
        let target_corrected = 1.5;
        let logits: Vec<f64> = (0..=k)
            .map(|i| {
                let corrected = if i == 0 { target_corrected } else { target_corrected - m - gaps[i - 1] };
                corrected + log_q[i]
            })
            .collect();
        let loss = is_loss(&logits, &log_q).unwrap();
        prop_assert!(loss < (1.0 + k as f64 * (-m).exp()).ln() + 1e-12);
    }

    #[test]
    fn metrics_are_consistent(nll in 0.0f64..20.0) {
        let r = metrics(nll);
        prop_assert!((r.bpc * std::f64::consts::LN_2 - nll).abs() <= 1e-12);
        prop_assert!((r.ppl.ln() - nll).abs() <= 1e-12);
    }

    #[test]
    fn char_round_trip_is_exact(text in "[a-zA-Z0-9 ,.;:!?'\\-\r\n]{0,200}") {
        let opts = Preprocess::char();
        let normalized = text.to_lowercase().replace('\r', "");
        let (vocab, ids) = cnflm::data::preprocess(&text, &opts);
        prop_assert_eq!(vocab.detokenize(&ids).unwrap(), normalized);
    }

    #[test]
    fn word_round_trip_modulo_whitespace(text in "([a-z]{1,6}[ \t]{1,3}){0,20}(\n[a-z ]{0,12}){0,4}") {
        let opts = Preprocess::word(None);
        let (vocab, ids) = cnflm::data::preprocess(&text, &opts);
        let back = vocab.detokenize(&ids).unwrap();
        let squash = |s: &str| s.split('\n').map(|l| l.split_whitespace().collect::<Vec<_>>().join(" ")).collect::<Vec<_>>();
        prop_assert_eq!(squash(&back), squash(&text.replace('\r', "")));
    }

    #[test]
    fn unseen_tokens_map_to_unk(train in "[a-f ]{1,80}", valid in "[a-z ]{1,80}") {
        let c = Corpus::from_texts(&train, &valid, "", &Preprocess::char());
        let seen: Vec<String> = tokenize(&train, &Preprocess::char());
        for (id, tok) in c.valid.iter().zip(tokenize(&valid, &Preprocess::char())) {
            if seen.contains(&tok) {
                prop_assert_eq!(c.vocab.token(*id).unwrap(), tok.as_str());
            } else {
                prop_assert_eq!(*id, c.vocab.unk());
            }
        }
    }

    #[test]
    fn vocab_ids_round_trip(tokens in prop::collection::vec("[a-z]{1,4}", 1..40)) {
        let v = Vocab::build(&tokens, Mode::Word, None);
        for t in &tokens {
            prop_assert_eq!(v.token(v.id(t).unwrap()).unwrap(), t.as_str());
        }
    }

    #[test]
    fn rank_of_product_is_bounded(seed in any::<u64>(), m in 2usize..9, k in 2usize..9, n in 2usize..9, ra in 1usize..5, rb in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = low_rank(m, k, ra, &mut rng);
        let b = low_rank(k, n, rb, &mut rng);
        let (rank_a, rank_b) = (numerical_rank(&a, RANK_TOL).unwrap(), numerical_rank(&b, RANK_TOL).unwrap());
        prop_assert!(numerical_rank(&matmul(&a, &b), RANK_TOL).unwrap() <= rank_a.min(rank_b));
    }

    #[test]
    fn rank_of_sum_is_subadditive(seed in any::<u64>(), m in 2usize..12, n in 2usize..12, ra in 1usize..4, rb in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = low_rank(m, n, ra, &mut rng);
        let b = low_rank(m, n, rb, &mut rng);
        let sum = a.zip_map(&b, |x, y| x + y).unwrap();
        let bound = numerical_rank(&a, RANK_TOL).unwrap() + numerical_rank(&b, RANK_TOL).unwrap();
        prop_assert!(numerical_rank(&sum, RANK_TOL).unwrap() <= bound);
    }

    #[test]
    fn svd_reconstructs(seed in any::<u64>(), m in 1usize..16, n in 1usize..16) {
        let a = Tensor::normal([m, n], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let d = svd(&a).unwrap();
        let rec = d.truncated(m.min(n));
        let err = rec.zip_map(&a, |x, y| x - y).unwrap().norm() / a.norm();
        prop_assert!(err < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_head_row_is_normalized(seed in any::<u64>(), vocab in 2usize..9, dim in 1usize..5, contexts in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in HeadKind::ALL {
            let mut cfg = HeadConfig::new(kind, vocab, dim);
            cfg.layer_dims = vec![dim + 1, dim];
            cfg.components = 2;
            cfg.flow_hidden = 3;
            cfg.ode = OdeOptions {
                solver: SolverConfig::fixed(Method::Rk4, 3),
                adjoint: false,
                ..OdeOptions::default()
            };
            let mut store = ParamStore::new();
            let head = Head::new(&mut store, cfg, None, &mut rng).unwrap();
            let mut t = Tape::new();
            let bound = store.bind(&mut t).unwrap();
            let l0 = t.constant(Tensor::normal([contexts, dim + 1], 2.0, &mut rng)).unwrap();
            let l1 = t.constant(Tensor::normal([contexts, dim], 2.0, &mut rng)).unwrap();
            let out = head.forward(&mut t, &bound, &[l0, l1]).unwrap();
            for row in t.value(out.logp).rows() {
                prop_assert!(logsumexp(row).abs() <= 1e-10, "{kind}: {}", logsumexp(row));
            }
        }
    }
}
