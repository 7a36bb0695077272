use std::path::Path;
use std::process::{Command, Output};

fn cnflm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cnflm"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn cnflm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn eval_json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(stdout(o).trim()).unwrap()
}

#[test]
fn grad_check_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = cnflm(&["grad-check", "--cases", "5", "--head-cases", "2", "--json", "grad.json"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains(", 0 failed"));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("grad.json")).unwrap()).unwrap();
    assert!(json.as_array().unwrap().len() > 30);
}

#[test]
fn fresh_char_model_is_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let o = cnflm(&["eval", "--set", "model.dim=16"], dir.path());
    let v = eval_json(&o);
    let vocab: Vec<char> = cnflm::data::bundled_splits().0.to_lowercase().replace(['\r', '\n'], "").chars().collect();
    let mut charset = vocab.clone();
    charset.sort_unstable();
    charset.dedup();
    // Characters plus the <unk> and <eos> specials.
    let expected = ((charset.len() + 2) as f64).log2();
    let bpc = v["bpc"].as_f64().unwrap();
    assert!((bpc - expected).abs() < 0.1, "bpc {bpc} vs {expected}");
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cnflm(&["eval", "--set", "model.nope=1"], dir.path()).status.code(), Some(2));
    assert_eq!(cnflm(&["eval", "--set", "train.lr=-1"], dir.path()).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.ini"), "[optim]\nlr = 3\n").unwrap();
    assert_eq!(cnflm(&["train", "--config", "bad.ini"], dir.path()).status.code(), Some(2));
    assert_eq!(cnflm(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = cnflm(&["eval", "--checkpoint", "missing.bin", "--set", "model.dim=8"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_eval_generate_and_rank() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    std::fs::write(cwd.join("run.ini"), "name = tiny\nseed = 4\n[model]\ndim = 12\n[train]\nepochs = 1\nbatch = 8\n").unwrap();
    let o = cnflm(&["train", "--config", "run.ini", "--out", "out"], cwd);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = cwd.join("out/tiny");
    for f in ["config.resolved", "metrics.csv", "ckpt-best", "ckpt-last", "report.json", "vocab.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,step,split,nll,ppl,bpc,wallclock_s"));
    let resolved = std::fs::read_to_string(run.join("config.resolved")).unwrap();
    assert!(resolved.contains("seed=4") && resolved.contains("emb_dim=12"));

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    let v = eval_json(&cnflm(&["eval", "--run", "out/tiny"], cwd));
    assert!((v["nll"].as_f64().unwrap() - report["best_valid"]["nll"].as_f64().unwrap()).abs() < 1e-9);

    let gen = |args: &[&str]| {
        let mut all = vec!["generate", "--run", "out/tiny", "--prompt", "thy ", "--length", "40"];
        all.extend_from_slice(args);
        let o = cnflm(&all, cwd);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let a = gen(&[]);
    assert!(a.starts_with("thy "));
    assert_eq!(a, gen(&[]));
    assert_eq!(gen(&["--temperature", "0.8", "--seed", "2"]), gen(&["--temperature", "0.8", "--seed", "2"]));

    let o = cnflm(&["analyze-rank", "--run", "out/tiny", "--contexts", "30"], cwd);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rank: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("rank.json")).unwrap()).unwrap();
    let logits = &rank["reports"][0];
    assert_eq!(logits["rows"], 30);
    // A 12-wide context plus the bias bounds the logit rank.
    assert!(logits["rank"].as_u64().unwrap() <= 13);
}

#[test]
fn transfer_and_freeze_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let base = ["--set", "model.dim=8", "--set", "train.epochs=1", "--set", "train.batch=8"];
    let mut args = vec!["train", "--set", "name=base"];
    args.extend_from_slice(&base);
    assert!(cnflm(&args, cwd).status.success());

    let mut args = vec![
        "train",
        "--set",
        "name=ft",
        "--set",
        "model.head=cnf",
        "--set",
        "model.flow_hidden=4",
        "--set",
        "model.solver=rk4",
        "--set",
        "model.solver_steps=2",
        "--set",
        "model.adjoint=false",
        "--set",
        "model.transfer=runs/base/ckpt-best",
        "--set",
        "model.freeze=embed.*,rnn.*",
        "--set",
        "train.optimizer=nt-asgd",
    ];
    args.extend_from_slice(&base);
    let o = cnflm(&args, cwd);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let read = |p: &str| cnflm::train::read_checkpoint(&mut std::fs::File::open(cwd.join(p)).unwrap()).unwrap();
    let before = read("runs/base/ckpt-best");
    let after = read("runs/ft/ckpt-last");
    let frozen: Vec<_> = before.iter().filter(|(n, _)| n.starts_with("embed") || n.starts_with("rnn")).collect();
    assert!(!frozen.is_empty());
    for (name, t) in frozen {
        let (_, u) = after.iter().find(|(n, _)| n == name).unwrap();
        assert_eq!(t, u, "{name} moved");
    }
    let (_, b0) = before.iter().find(|(n, _)| n == "head.out.weight").unwrap();
    let (_, b1) = after.iter().find(|(n, _)| n == "head.out.weight").unwrap();
    assert_ne!(b0, b1);
}

#[test]
fn bottleneck_subcommand_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = cnflm(&["analyze-rank", "--n", "6", "--m", "6", "--d", "2", "--heads", "softmax,mos", "--steps", "50"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("runs/bottleneck/bottleneck.csv")).unwrap();
    assert!(csv.starts_with("head,N,M,D,kl_gap,rank"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(
        cnflm(&["analyze-rank", "--heads", "softmax,nope"], dir.path()).status.code(),
        Some(2)
    );
}
