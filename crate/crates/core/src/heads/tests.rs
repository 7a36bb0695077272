use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::grad_check_many;
use crate::ode::{Method, SolverConfig};

fn fixed_ode() -> OdeOptions {
    OdeOptions {
        solver: SolverConfig::fixed(Method::Rk4, 5),
        adjoint: false,
        ..OdeOptions::default()
    }
}

fn consts(t: &mut Tape, xs: &[Tensor]) -> Vec<Var> {
    xs.iter().map(|x| t.constant(x.clone()).unwrap()).collect()
}

fn row_sums_ok(m: &Tensor) {
    for r in m.rows() {
        let s = crate::autograd::kernels::logsumexp(r);
        assert!(s.abs() < 1e-10, "row logsumexp {s}");
    }
}

#[test]
fn softmax_closed_forms() {
    let mut t = Tape::new();
    let h = t.constant(Tensor::zeros([2, 3])).unwrap();
    let e = t.constant(Tensor::normal([5, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(0))).unwrap();
    let lp = softmax_head(&mut t, h, e, None).unwrap();
    assert!(t.value(lp).data().iter().all(|v| (v + 5f64.ln()).abs() < 1e-15));

    let h = t.constant(Tensor::new([1, 1], vec![1.0]).unwrap()).unwrap();
    let e = t.constant(Tensor::new([2, 1], vec![1.0, -1.0]).unwrap()).unwrap();
    let lp = softmax_head(&mut t, h, e, None).unwrap();
    let z = (-2f64).exp().ln_1p();
    assert!((t.value(lp).data()[0] + z).abs() < 1e-15);
    assert!((t.value(lp).data()[1] + 2.0 + z).abs() < 1e-15);
}

#[test]
fn mos_single_component_is_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Tensor::normal([4, 3], 1.0, &mut rng);
    let w = Tensor::normal([3, 3], 0.5, &mut rng);
    let e = Tensor::normal([7, 3], 1.0, &mut rng);
    let b = Tensor::normal([7], 1.0, &mut rng);
    let prior = Tensor::normal([1, 3], 1.0, &mut rng);
    let mut t = Tape::new();
    let v = consts(&mut t, &[g, w, e, b, prior]);
    let mos = mos_head(&mut t, v[0], &[v[1]], v[4], v[2], Some(v[3])).unwrap();
    let pre = t.matmul_t(v[0], v[1]).unwrap();
    let hk = t.tanh(pre).unwrap();
    let sm = softmax_head(&mut t, hk, v[2], Some(v[3])).unwrap();
    assert!(t.value(mos).max_abs_diff(t.value(sm)) <= 1e-12);
    assert!(mos_head(&mut t, v[0], &[], v[4], v[2], None).is_err());
}

#[test]
fn mixture_rows_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = Tape::new();
    let g = t.constant(Tensor::normal([6, 4], 2.0, &mut rng)).unwrap();
    let proj: Vec<Var> = (0..3).map(|_| t.constant(Tensor::normal([4, 4], 1.0, &mut rng)).unwrap()).collect();
    let prior = t.constant(Tensor::normal([3, 4], 1.0, &mut rng)).unwrap();
    let e = t.constant(Tensor::normal([9, 4], 1.0, &mut rng)).unwrap();
    let lp = mos_head(&mut t, g, &proj, prior, e, None).unwrap();
    for r in t.value(lp).rows() {
        let s: f64 = r.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let pi = log_mixture_weights(&mut t, g, prior).unwrap();
    for r in t.value(pi).rows() {
        assert!((r.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn doc_on_last_layer_is_mos() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::new();
    let h0 = t.constant(Tensor::normal([3, 5], 1.0, &mut rng)).unwrap();
    let h1 = t.constant(Tensor::normal([3, 4], 1.0, &mut rng)).unwrap();
    let proj: Vec<Var> = (0..3).map(|_| t.constant(Tensor::normal([4, 4], 1.0, &mut rng)).unwrap()).collect();
    let prior = t.constant(Tensor::normal([3, 4], 1.0, &mut rng)).unwrap();
    let e = t.constant(Tensor::normal([6, 4], 1.0, &mut rng)).unwrap();
    let b = t.constant(Tensor::normal([6], 1.0, &mut rng)).unwrap();
    let doc = doc_head(&mut t, &[h0, h1], &[0, 3], &proj, prior, e, Some(b)).unwrap();
    let mos = mos_head(&mut t, h1, &proj, prior, e, Some(b)).unwrap();
    assert!(t.value(doc).max_abs_diff(t.value(mos)) <= 1e-12);
    assert!(doc_head(&mut t, &[h0, h1], &[1, 1], &proj, prior, e, Some(b)).is_err());
    assert!(doc_head(&mut t, &[h0, h1], &[3], &proj, prior, e, Some(b)).is_err());

    // J = 1 is a softmax over W̃ tanh(W₁ h).
    let w = t.constant(Tensor::normal([4, 5], 1.0, &mut rng)).unwrap();
    let pr = t.constant(Tensor::normal([1, 4], 1.0, &mut rng)).unwrap();
    let doc = doc_head(&mut t, &[h0, h1], &[1, 0], &[w], pr, e, None).unwrap();
    let pre = t.matmul_t(h0, w).unwrap();
    let k = t.tanh(pre).unwrap();
    let sm = softmax_head(&mut t, k, e, None).unwrap();
    assert!(t.value(doc).max_abs_diff(t.value(sm)) <= 1e-12);
}

#[test]
fn default_doc_assignment() {
    let mut cfg = HeadConfig::new(HeadKind::Doc, 10, 4);
    cfg.layer_dims = vec![8, 6, 4];
    cfg.components = 5;
    assert_eq!(cfg.assignment(), vec![0, 2, 3]);
    cfg.layer_dims = vec![4];
    assert_eq!(cfg.assignment(), vec![5]);
}

fn zero_flow(f: &MlpDynamics, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut p = f.init_params(rng);
    p[1] = Tensor::zeros(p[1].shape().to_vec());
    p
}

#[test]
fn flows_at_rest_reduce_to_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c, v, d) = (3, 6, 4);
    let h = Tensor::normal([c, d], 1.0, &mut rng);
    let e = Tensor::normal([v, d], 1.0, &mut rng);
    let b = Tensor::normal([v], 1.0, &mut rng);
    for ode in [fixed_ode(), OdeOptions::default()] {
        let mut t = Tape::new();
        let x = consts(&mut t, &[h.clone(), e.clone(), b.clone()]);
        let sm = softmax_head(&mut t, x[0], x[1], Some(x[2])).unwrap();

        let node = MlpDynamics::new(v, 3, None, Activation::Softplus);
        let np = consts(&mut t, &zero_flow(&node, &mut rng));
        let (_, lp) = node_logit_head(&mut t, x[0], x[1], Some(x[2]), &node, &np, &ode).unwrap();
        assert!(t.value(lp).max_abs_diff(t.value(sm)) <= 1e-12);

        let f = MlpDynamics::new(d, 5, None, Activation::Relu);
        let fp = consts(&mut t, &zero_flow(&f, &mut rng));
        let out = cnf_head(&mut t, x[0], x[1], Some(x[2]), &f, &fp, &ode, &TraceEstimator::exact()).unwrap();
        assert!(t.value(out.logp).max_abs_diff(t.value(sm)) <= 1e-12);
        assert!(t.value(out.delta_logp).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn context_flow_without_context_weights_is_shared_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, v, d, m) = (3, 5, 4, 6);
    let h = Tensor::normal([c, d], 1.0, &mut rng);
    let e = Tensor::normal([v, d], 1.0, &mut rng);
    let b = Tensor::normal([v], 1.0, &mut rng);
    let shared = MlpDynamics::new(d, m, None, Activation::Relu);
    let ctxf = MlpDynamics::new(d, m, Some(d), Activation::Relu);
    let sp = shared.init_params(&mut rng);
    let mut cp = sp.clone();
    cp.push(Tensor::zeros([m, d]));
    for ode in [fixed_ode(), OdeOptions::default()] {
        let mut t = Tape::new();
        let x = consts(&mut t, &[h.clone(), e.clone(), b.clone()]);
        let spv = consts(&mut t, &sp);
        let cpv = consts(&mut t, &cp);
        let a = cnf_head(&mut t, x[0], x[1], Some(x[2]), &shared, &spv, &ode, &TraceEstimator::exact()).unwrap();
        let bb = context_cnf_head(&mut t, x[0], x[1], Some(x[2]), &ctxf, &cpv, &ode, &TraceEstimator::exact(), usize::MAX).unwrap();
        assert!(t.value(a.logp).max_abs_diff(t.value(bb.logp)) <= 1e-12);
        row_sums_ok(t.value(bb.logp));
    }
}

#[test]
fn context_flow_rows_differ_and_budget_is_enforced() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (c, v, d) = (2, 5, 3);
    let f = MlpDynamics::new(d, 4, Some(d), Activation::Relu);
    let fp = f.init_params(&mut rng);
    let mut t = Tape::new();
    let h = t.constant(Tensor::normal([c, d], 1.0, &mut rng)).unwrap();
    let e = t.constant(Tensor::normal([v, d], 1.0, &mut rng)).unwrap();
    let pv = consts(&mut t, &fp);
    let out = context_cnf_head(&mut t, h, e, None, &f, &pv, &fixed_ode(), &TraceEstimator::exact(), 1000).unwrap();
    let dl = t.value(out.delta_logp);
    let diff = dl.row(0).iter().zip(dl.row(1)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(diff > 1e-6);
    let res = context_cnf_head(&mut t, h, e, None, &f, &pv, &fixed_ode(), &TraceEstimator::exact(), c * v * d - 1);
    assert!(matches!(res, Err(Error::MemoryBudget { .. })));
}

fn build(kind: HeadKind, rng: &mut ChaCha8Rng) -> (ParamStore, Head) {
    let mut cfg = HeadConfig::new(kind, 7, 3);
    cfg.layer_dims = vec![4, 3];
    cfg.components = 3;
    cfg.flow_hidden = 4;
    cfg.ode = fixed_ode();
    let mut store = ParamStore::new();
    let head = Head::new(&mut store, cfg, None, rng).unwrap();
    (store, head)
}

#[test]
fn every_head_is_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kind in HeadKind::ALL {
        let (store, head) = build(kind, &mut rng);
        let mut t = Tape::new();
        let bound = store.bind(&mut t).unwrap();
        let l0 = t.constant(Tensor::normal([5, 4], 1.0, &mut rng)).unwrap();
        let l1 = t.constant(Tensor::normal([5, 3], 1.0, &mut rng)).unwrap();
        let out = head.forward(&mut t, &bound, &[l0, l1]).unwrap();
        assert_eq!(t.shape(out.logp), &[5, 7], "{kind}");
        row_sums_ok(t.value(out.logp));
    }
}

#[test]
fn every_head_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for kind in HeadKind::ALL {
        let (store, head) = build(kind, &mut rng);
        let targets = [1usize, 6, 0];
        let mut points = store.values();
        points.push(Tensor::normal([3, 4], 1.0, &mut rng));
        points.push(Tensor::normal([3, 3], 1.0, &mut rng));
        let np = store.len();
        let err = grad_check_many(
            |t, v| {
                let bound = crate::nn::Bound::from_vars(v[..np].to_vec());
                let out = head.forward(t, &bound, &v[np..])?;
                let picked = t.pick(out.logp, &targets)?;
                let m = t.mean(picked)?;
                t.neg(m)
            },
            &points,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{kind}: {err}");
    }
}

#[test]
fn tied_dimension_mismatch_is_a_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let emb = store.add("embed.weight", Tensor::zeros([7, 5])).unwrap();
    let cfg = HeadConfig::new(HeadKind::Softmax, 7, 3);
    assert!(matches!(Head::new(&mut store, cfg.clone(), Some(emb), &mut rng), Err(Error::Config(_))));
    let emb3 = store.add("embed3.weight", Tensor::zeros([7, 3])).unwrap();
    let head = Head::new(&mut store, cfg, Some(emb3), &mut rng).unwrap();
    assert_eq!(head.output, emb3);
}

#[test]
fn sampled_logits_agree_with_full_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for kind in [HeadKind::Softmax, HeadKind::Cnf, HeadKind::ContextCnf] {
        let (store, head) = build(kind, &mut rng);
        let mut t = Tape::new();
        let bound = store.bind(&mut t).unwrap();
        let h = t.constant(Tensor::normal([2, 3], 1.0, &mut rng)).unwrap();
        let full = head.matrix(&mut t, &bound, &[h], MatrixKind::Logits).unwrap();
        let cands = [3, 0, 6, 1, 1, 5];
        let s = head.sampled_logits(&mut t, &bound, h, &cands, 3).unwrap();
        for c in 0..2 {
            for j in 0..3 {
                let want = t.value(full).at(&[c, cands[c * 3 + j]]);
                assert!((t.value(s).at(&[c, j]) - want).abs() < 1e-12, "{kind}");
            }
        }
    }
    let (store, head) = build(HeadKind::Mos, &mut rng);
    let mut t = Tape::new();
    let bound = store.bind(&mut t).unwrap();
    let h = t.constant(Tensor::zeros([1, 3])).unwrap();
    assert!(head.sampled_logits(&mut t, &bound, h, &[0, 1], 2).is_err());
}

#[test]
fn matrix_kinds() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (store, head) = build(HeadKind::Cnf, &mut rng);
    let mut t = Tape::new();
    let bound = store.bind(&mut t).unwrap();
    let h = t.constant(Tensor::normal([4, 3], 1.0, &mut rng)).unwrap();
    let dl = head.matrix(&mut t, &bound, &[h], MatrixKind::DeltaLogp).unwrap();
    let m = t.value(dl);
    for r in 1..4 {
        assert_eq!(m.row(r), m.row(0));
    }
    let (store, head) = build(HeadKind::Mos, &mut rng);
    let mut t = Tape::new();
    let bound = store.bind(&mut t).unwrap();
    let h = t.constant(Tensor::normal([4, 3], 1.0, &mut rng)).unwrap();
    assert!(matches!(head.matrix(&mut t, &bound, &[h], MatrixKind::Logits), Err(Error::Unsupported(_))));
    assert!(matches!(head.matrix(&mut t, &bound, &[h], MatrixKind::DeltaLogp), Err(Error::Unsupported(_))));
}
