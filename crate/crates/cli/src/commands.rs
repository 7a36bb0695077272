//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cnflm::autograd::{Tape, Tensor};
use cnflm::data::{bundled_splits, read_text, unigram_entropy, Corpus, Vocab};
use cnflm::heads::{HeadKind, MatrixKind};
use cnflm::rank::{assemble_matrix, bottleneck_experiment, BottleneckConfig, RankReport, DEFAULT_RANK_TOL};
use cnflm::selfcheck::{gradient_suite, SuiteConfig};
use cnflm::train::{
    evaluate, load_checkpoint, save_checkpoint, LanguageModel, LoadMode, Metrics, MetricsLog, MetricsRow,
};

use crate::config::RunConfig;
use crate::{CliError, Common};

pub const CONFIG_FILE: &str = "config.resolved";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const BEST: &str = "ckpt-best";
pub const LAST: &str = "ckpt-last";

/// Run directory config, then `--config`, then `--set`, then `--seed`.
fn resolve(common: &Common, run: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    let mut files: Vec<PathBuf> = run.map(|d| d.join(CONFIG_FILE)).into_iter().collect();
    files.extend(common.config.clone());
    for path in files {
        let ini = ini::Ini::load_from_file(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_ini(&ini)?;
    }
    for s in &common.overrides {
        cfg.set_override(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn texts(cfg: &RunConfig) -> Result<[String; 3], CliError> {
    Ok(match cfg.data.paths()? {
        Some(paths) => [read_text(&paths[0])?, read_text(&paths[1])?, read_text(&paths[2])?],
        None => {
            let (a, b, c) = bundled_splits();
            [a, b, c]
        }
    })
}

/// The corpus, encoded with the run's saved vocabulary when there is one.
fn corpus(cfg: &RunConfig, run: Option<&Path>) -> Result<Corpus, CliError> {
    let [train, valid, test] = texts(cfg)?;
    let opts = cfg.preprocess();
    match run.map(|d| d.join(VOCAB_FILE)).filter(|p| p.exists()) {
        Some(path) => {
            let vocab = Vocab::load(&path, cfg.mode)?;
            Ok(Corpus {
                train: vocab.encode_text(&train, &opts),
                valid: vocab.encode_text(&valid, &opts),
                test: vocab.encode_text(&test, &opts),
                vocab,
            })
        }
        None => Ok(Corpus::from_texts(&train, &valid, &test, &opts)),
    }
}

fn model(cfg: &RunConfig, vocab: usize, checkpoint: Option<&Path>) -> Result<LanguageModel, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = LanguageModel::new(cfg.model_config(vocab), &mut rng)?;
    if let Some(path) = checkpoint {
        load_checkpoint(&mut m.store, path, LoadMode::Exact)?;
        info!("loaded {}", path.display());
    }
    Ok(m)
}

fn checkpoint_path(run: Option<&Path>, explicit: Option<&Path>) -> Option<PathBuf> {
    explicit.map(Path::to_path_buf).or_else(|| run.map(|d| d.join(BEST)))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    name: String,
    mode: String,
    head: String,
    vocab: usize,
    parameters: usize,
    steps: usize,
    skipped_steps: usize,
    triggered_at: Option<usize>,
    /// Order-0 entropy of the training stream, bits per token.
    unigram_entropy_bits: f64,
    valid_per_epoch: &'a [Metrics],
    average_valid: Option<Metrics>,
    best_valid: Metrics,
    test: Metrics,
    wallclock_s: f64,
}

pub fn train(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common, None)?;
    let corpus = corpus(&cfg, None)?;
    let dir = common.out.join(cfg.run_name());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_ini_string())?;
    corpus.vocab.save(&dir.join(VOCAB_FILE))?;
    info!(
        "run {}: vocab {}, {} train / {} valid / {} test tokens",
        dir.display(),
        corpus.vocab.len(),
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len()
    );

    let mut m = model(&cfg, corpus.vocab.len(), None)?;
    if let Some(path) = &cfg.transfer {
        let n = load_checkpoint(&mut m.store, path, LoadMode::Transfer)?;
        info!("transferred {n} tensors from {}", path.display());
    }
    let tc = cfg.train_config();
    let mut log = MetricsLog::create(&dir.join("metrics.csv"))?;
    let mut on_row = |row: &MetricsRow| {
        info!("epoch {} step {} {}: nll {:.4} ppl {:.3} bpc {:.4}", row.epoch, row.step, row.split, row.nll, row.ppl, row.bpc);
        log.append(row)
    };
    let report = cnflm::train::train(&mut m, &corpus.train, &corpus.valid, &tc, &mut on_row)?;

    save_checkpoint(&m.store, &dir.join(BEST))?;
    let mut last = m.store.clone();
    last.set_values(&report.last_params)?;
    save_checkpoint(&last, &dir.join(LAST))?;

    let test = evaluate(&m, &corpus.test, tc.eval_batch, tc.bptt, None)?;
    let summary = TrainSummary {
        name: cfg.run_name(),
        mode: cfg.mode.to_string(),
        head: cfg.model.head.kind.to_string(),
        vocab: corpus.vocab.len(),
        parameters: m.store.num_elements(),
        steps: report.steps,
        skipped_steps: report.skipped_steps,
        triggered_at: report.triggered_at,
        unigram_entropy_bits: unigram_entropy(&corpus.train) / std::f64::consts::LN_2,
        valid_per_epoch: &report.valid,
        average_valid: report.average_valid,
        best_valid: report.best_valid,
        test,
        wallclock_s: report.wallclock_s,
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!(
        "{}: best valid bpc {:.4} (ppl {:.3}), test bpc {:.4} (ppl {:.3})",
        dir.display(),
        report.best_valid.bpc,
        report.best_valid.ppl,
        test.bpc,
        test.ppl
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalLine<'a> {
    split: &'a str,
    tokens: usize,
    nll: f64,
    ppl: f64,
    bpc: f64,
}

pub fn eval(common: &Common, run: Option<&Path>, checkpoint: Option<&Path>, split: &str) -> Result<(), CliError> {
    let cfg = resolve(common, run)?;
    let corpus = corpus(&cfg, run)?;
    let stream = corpus.split(split).map_err(|e| CliError::Config(e.to_string()))?;
    let m = model(&cfg, corpus.vocab.len(), checkpoint_path(run, checkpoint).as_deref())?;
    let r = evaluate(&m, stream, cfg.train.eval_batch, cfg.train.bptt, cfg.train.max_eval_windows)?;
    let line = EvalLine {
        split,
        tokens: stream.len(),
        nll: r.nll,
        ppl: r.ppl,
        bpc: r.bpc,
    };
    println!("{}", serde_json::to_string(&line)?);
    Ok(())
}

pub fn generate(
    common: &Common,
    run: Option<&Path>,
    checkpoint: Option<&Path>,
    prompt: &str,
    length: usize,
    temperature: f64,
) -> Result<(), CliError> {
    if !(temperature >= 0.0) {
        return Err(CliError::Config(format!("temperature {temperature} must be >= 0")));
    }
    let cfg = resolve(common, run)?;
    let corpus = corpus(&cfg, run)?;
    let m = model(&cfg, corpus.vocab.len(), checkpoint_path(run, checkpoint).as_deref())?;
    let mut ids = corpus.vocab.encode_text(prompt, &cfg.preprocess());
    if ids.is_empty() {
        ids.push(corpus.vocab.eos());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = m.generate(&ids, length, temperature, &mut rng)?;
    println!("{prompt}{}", corpus.vocab.detokenize(&out)?);
    Ok(())
}

#[derive(Serialize)]
struct RunRank {
    split: String,
    contexts: usize,
    reports: Vec<RankReport>,
}

pub fn rank_of_run(
    common: &Common,
    run: &Path,
    checkpoint: Option<&Path>,
    contexts: usize,
    split: &str,
) -> Result<(), CliError> {
    if contexts == 0 {
        return Err(CliError::Config("--contexts must be >= 1".into()));
    }
    let cfg = resolve(common, Some(run))?;
    let corpus = corpus(&cfg, Some(run))?;
    let stream = corpus.split(split).map_err(|e| CliError::Config(e.to_string()))?;
    let m = model(&cfg, corpus.vocab.len(), checkpoint_path(Some(run), checkpoint).as_deref())?;
    let inputs: Vec<Vec<usize>> = stream.iter().take(contexts).map(|&id| vec![id]).collect();
    if inputs.is_empty() {
        return Err(cnflm::Error::EmptyStream.into());
    }

    let mut tape = Tape::new();
    let bound = m.store.bind(&mut tape)?;
    let fw = m.encode::<ChaCha8Rng>(&mut tape, &bound, &inputs, &m.init_state(1), None)?;
    let layers: Vec<Tensor> = fw.layers.iter().map(|&v| tape.value(v).clone()).collect();
    let mut kinds = vec![("logits", MatrixKind::Logits), ("logp", MatrixKind::Logp)];
    if matches!(cfg.model.head.kind, HeadKind::Cnf | HeadKind::ContextCnf) {
        kinds.push(("delta_logp", MatrixKind::DeltaLogp));
    }
    let mut reports = Vec::new();
    for (label, kind) in kinds {
        let mat = assemble_matrix(&m.head, &m.store, &layers, kind)?;
        let r = RankReport::new(format!("{}:{label}", cfg.model.head.kind), &mat, DEFAULT_RANK_TOL)?;
        println!("{:24} {}x{} rank {}", r.head, r.rows, r.cols, r.rank);
        reports.push(r);
    }
    let out = RunRank {
        split: split.to_owned(),
        contexts: inputs.len(),
        reports,
    };
    fs::write(run.join("rank.json"), serde_json::to_string_pretty(&out)? + "\n")?;
    Ok(())
}

pub fn bottleneck(
    common: &Common,
    n: usize,
    m: usize,
    d: usize,
    heads: &str,
    steps: Option<usize>,
    scale: Option<f64>,
) -> Result<(), CliError> {
    let heads = heads
        .split(',')
        .map(|h| h.trim().parse::<HeadKind>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let defaults = BottleneckConfig::default();
    let cfg = BottleneckConfig {
        n,
        m,
        d,
        heads,
        steps: steps.unwrap_or(defaults.steps),
        target_scale: scale.unwrap_or(defaults.target_scale),
        seed: common.seed.unwrap_or(defaults.seed),
        ..defaults
    };
    let report = bottleneck_experiment(&cfg).map_err(|e| match e {
        cnflm::Error::Config(s) => CliError::Config(s),
        e => e.into(),
    })?;
    println!(
        "target: {}x{}, rank {}, entropy {:.4} nats; rank-{} SVD oracle gap {:.5}",
        report.n, report.m, report.target_rank, report.target_entropy, report.d, report.oracle_gap
    );
    for r in &report.results {
        let delta = r.delta_rank.map_or_else(|| "-".into(), |x| x.to_string());
        println!(
            "{:12} kl_gap {:.5}  rank {:3}  delta_rank {:>3}  converged {}",
            r.head, r.kl_gap, r.rank, delta, r.converged
        );
    }
    let dir = common.out.join("bottleneck");
    fs::create_dir_all(&dir)?;
    report.write_csv(&dir.join("bottleneck.csv"))?;
    report.write_json(&dir.join("report.json"))?;
    Ok(())
}

pub fn grad_check(seed: u64, cases: usize, head_cases: usize, json: Option<&Path>) -> Result<(), CliError> {
    let results = gradient_suite(&SuiteConfig {
        seed,
        cases,
        head_cases,
    })?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!("{:20} {:9} {:4} cases  max error {:.3e} < {:.0e}  {verdict}", r.name, format!("{:?}", r.group).to_lowercase(), r.cases, r.max_error, r.tol);
    }
    if let Some(path) = json {
        fs::write(path, serde_json::to_string_pretty(&results)? + "\n")?;
    }
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} gradient checks failed")));
    }
    Ok(())
}
