//! Run configuration: an INI file with `[model]`, `[train]` and `[data]`
//! sections (plus top-level `name` and `seed`), overridden by
//! `--set section.key=value`.

use std::path::PathBuf;
use std::str::FromStr;

use ini::Ini;

use cnflm::cnf::{Noise, TraceEstimator, TraceMode};
use cnflm::data::{Mode, Preprocess};
use cnflm::heads::HeadKind;
use cnflm::ode::{Activation, Method};
use cnflm::train::{ModelConfig, Optimizer, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub max_vocab: Option<usize>,
}

impl DataConfig {
    /// All three paths, or none (the bundled corpus).
    pub fn paths(&self) -> Result<Option<[PathBuf; 3]>, CliError> {
        match (&self.train, &self.valid, &self.test) {
            (None, None, None) => Ok(None),
            (Some(a), Some(b), Some(c)) => Ok(Some([a.clone(), b.clone(), c.clone()])),
            _ => Err(CliError::Config("data.train, data.valid and data.test must be given together".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: Option<String>,
    pub seed: u64,
    pub mode: Mode,
    /// `vocab` is a placeholder until the corpus is loaded.
    pub model: ModelConfig,
    /// Checkpoint to warm-start from; tensors it lacks keep their init.
    pub transfer: Option<PathBuf>,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::new(HeadKind::Softmax, 1, 64, 2);
        model.head.components = 4;
        model.head.flow_hidden = 32;
        let train = TrainConfig {
            lr: 10.0,
            clip: 1.0,
            bptt: 35,
            batch: 16,
            eval_batch: 10,
            epochs: 10,
            ..TrainConfig::default()
        };
        Self {
            name: None,
            seed: 0,
            mode: Mode::Char,
            model,
            transfer: None,
            train,
            data: DataConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

// `0` and the empty string both mean "unset".
fn parse_opt(key: &str, value: &str) -> Result<Option<usize>, CliError> {
    match value {
        "" | "0" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_opt(v: Option<usize>) -> String {
    v.map_or_else(|| "0".into(), |x| x.to_string())
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

fn core_err(e: cnflm::Error) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    /// Sets one key. `section` is `""` for top-level keys.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), CliError> {
        let full = if section.is_empty() { key.to_owned() } else { format!("{section}.{key}") };
        let k = full.as_str();
        let v = value.trim();
        let m = &mut self.model;
        let h = &mut m.head;
        let t = &mut self.train;
        match k {
            "name" => self.name = (!v.is_empty()).then(|| v.to_owned()),
            "seed" => self.seed = parse(k, v)?,

            "model.mode" => self.mode = v.parse().map_err(core_err)?,
            "model.head" => h.kind = v.parse().map_err(core_err)?,
            "model.dim" => {
                let d = parse(k, v)?;
                (m.emb_dim, m.hidden, m.out_dim) = (d, d, d);
            }
            "model.emb_dim" => m.emb_dim = parse(k, v)?,
            "model.hidden" => m.hidden = parse(k, v)?,
            "model.out_dim" => m.out_dim = parse(k, v)?,
            "model.layers" => m.layers = parse(k, v)?,
            "model.tie" => m.tie = parse_bool(k, v)?,
            "model.dropout" => m.dropout = parse(k, v)?,
            "model.dropout_emb" => m.dropout_emb = parse(k, v)?,
            "model.weight_drop" => m.weight_drop = parse(k, v)?,
            "model.components" => h.components = parse(k, v)?,
            "model.doc_assignment" => {
                h.doc_assignment = parse_list(v).iter().map(|x| parse(k, x)).collect::<Result<_, _>>()?
            }
            "model.flow_hidden" => h.flow_hidden = parse(k, v)?,
            "model.activation" => {
                h.activation = match v {
                    "" | "default" => None,
                    a => Some(a.parse::<Activation>().map_err(core_err)?),
                }
            }
            "model.bias" => h.bias = parse_bool(k, v)?,
            "model.solver" => h.ode.solver.method = v.parse::<Method>().map_err(core_err)?,
            "model.solver_steps" => h.ode.solver.steps = parse(k, v)?,
            "model.rtol" => h.ode.solver.rtol = parse(k, v)?,
            "model.atol" => h.ode.solver.atol = parse(k, v)?,
            "model.max_evals" => h.ode.solver.max_evals = parse(k, v)?,
            "model.t1" => h.ode.t1 = parse(k, v)?,
            "model.adjoint" => h.ode.adjoint = parse_bool(k, v)?,
            "model.trace" => {
                h.trace.mode = match v {
                    "exact" => TraceMode::Exact,
                    "hutchinson" => match h.trace.mode {
                        TraceMode::Hutchinson { .. } => h.trace.mode,
                        TraceMode::Exact => TraceMode::Hutchinson {
                            samples: 1,
                            noise: Noise::Rademacher,
                        },
                    },
                    _ => return Err(CliError::Config(format!("{k}: expected exact or hutchinson, got {v:?}"))),
                }
            }
            "model.trace_samples" | "model.trace_noise" => {
                let TraceMode::Hutchinson { samples, noise } = &mut h.trace.mode else {
                    return Err(CliError::Config(format!("{k} needs model.trace = hutchinson first")));
                };
                if k == "model.trace_samples" {
                    *samples = parse(k, v)?;
                } else {
                    *noise = v.parse().map_err(core_err)?;
                }
            }
            "model.memory_budget" => h.memory_budget = parse(k, v)?,
            "model.is_samples" => t.is_samples = parse_opt(k, v)?,
            "model.freeze" => t.freeze = parse_list(v),
            "model.transfer" => self.transfer = opt_path(v),

            "train.lr" => t.lr = parse(k, v)?,
            "train.clip" => t.clip = parse(k, v)?,
            "train.bptt" => t.bptt = parse(k, v)?,
            "train.batch" => t.batch = parse(k, v)?,
            "train.eval_batch" => t.eval_batch = parse(k, v)?,
            "train.epochs" => t.epochs = parse(k, v)?,
            "train.optimizer" => t.optimizer = v.parse::<Optimizer>().map_err(core_err)?,
            "train.log_interval" => t.log_interval = parse(k, v)?,
            "train.nonmono" => t.nonmono = parse(k, v)?,
            "train.trigger_windows" => t.trigger_windows = parse(k, v)?,
            "train.is_alpha" => t.is_alpha = parse(k, v)?,
            "train.max_eval_windows" => t.max_eval_windows = parse_opt(k, v)?,

            "data.train" => self.data.train = opt_path(v),
            "data.valid" => self.data.valid = opt_path(v),
            "data.test" => self.data.test = opt_path(v),
            "data.max_vocab" => self.data.max_vocab = parse_opt(k, v)?,

            _ => return Err(CliError::Config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    /// Applies `section.key=value` (or `key=value` for top-level keys).
    pub fn set_override(&mut self, spec: &str) -> Result<(), CliError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {spec:?}")))?;
        match key.trim().split_once('.') {
            Some((section, k)) => self.set(section, k, value),
            None => self.set("", key.trim(), value),
        }
    }

    pub fn apply_ini(&mut self, ini: &Ini) -> Result<(), CliError> {
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            if !matches!(section, "" | "model" | "train" | "data") {
                return Err(CliError::Config(format!("unknown section [{section}]")));
            }
            for (k, v) in props.iter() {
                self.set(section, k, v)?;
            }
        }
        Ok(())
    }

    #[cfg(test)]
    pub fn from_ini_str(text: &str) -> Result<Self, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg = Self::default();
        cfg.apply_ini(&ini)?;
        Ok(cfg)
    }

    /// Every key with its resolved value; reading it back gives `self`.
    pub fn to_ini(&self) -> Ini {
        let m = &self.model;
        let h = &m.head;
        let t = &self.train;
        let mut ini = Ini::new();
        ini.with_general_section()
            .set("name", self.name.clone().unwrap_or_default())
            .set("seed", self.seed.to_string());
        let mut s = ini.with_section(Some("model"));
        s.set("mode", self.mode.to_string())
            .set("head", h.kind.to_string())
            .set("emb_dim", m.emb_dim.to_string())
            .set("hidden", m.hidden.to_string())
            .set("out_dim", m.out_dim.to_string())
            .set("layers", m.layers.to_string())
            .set("tie", m.tie.to_string())
            .set("dropout", m.dropout.to_string())
            .set("dropout_emb", m.dropout_emb.to_string())
            .set("weight_drop", m.weight_drop.to_string())
            .set("components", h.components.to_string())
            .set(
                "doc_assignment",
                h.doc_assignment.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            )
            .set("flow_hidden", h.flow_hidden.to_string())
            .set("activation", h.activation.map_or_else(|| "default".into(), |a| a.to_string()))
            .set("bias", h.bias.to_string())
            .set("solver", h.ode.solver.method.to_string())
            .set("solver_steps", h.ode.solver.steps.to_string())
            .set("rtol", h.ode.solver.rtol.to_string())
            .set("atol", h.ode.solver.atol.to_string())
            .set("max_evals", h.ode.solver.max_evals.to_string())
            .set("t1", h.ode.t1.to_string())
            .set("adjoint", h.ode.adjoint.to_string());
        match h.trace.mode {
            TraceMode::Exact => {
                s.set("trace", "exact");
            }
            TraceMode::Hutchinson { samples, noise } => {
                s.set("trace", "hutchinson")
                    .set("trace_samples", samples.to_string())
                    .set("trace_noise", noise.to_string());
            }
        }
        s.set("memory_budget", h.memory_budget.to_string())
            .set("is_samples", show_opt(t.is_samples))
            .set("freeze", t.freeze.join(","))
            .set("transfer", show_path(&self.transfer));
        ini.with_section(Some("train"))
            .set("lr", t.lr.to_string())
            .set("clip", t.clip.to_string())
            .set("bptt", t.bptt.to_string())
            .set("batch", t.batch.to_string())
            .set("eval_batch", t.eval_batch.to_string())
            .set("epochs", t.epochs.to_string())
            .set("optimizer", t.optimizer.to_string())
            .set("log_interval", t.log_interval.to_string())
            .set("nonmono", t.nonmono.to_string())
            .set("trigger_windows", t.trigger_windows.to_string())
            .set("is_alpha", t.is_alpha.to_string())
            .set("max_eval_windows", show_opt(t.max_eval_windows));
        ini.with_section(Some("data"))
            .set("train", show_path(&self.data.train))
            .set("valid", show_path(&self.data.valid))
            .set("test", show_path(&self.data.test))
            .set("max_vocab", show_opt(self.data.max_vocab));
        ini
    }

    pub fn to_ini_string(&self) -> String {
        let mut buf = Vec::new();
        self.to_ini().write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ini output is UTF-8")
    }

    /// Checks everything that does not depend on the corpus.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut probe = self.model.clone();
        probe.vocab = 2;
        probe.head.vocab = 2;
        probe.validate().map_err(core_err)?;
        self.train.validate().map_err(core_err)?;
        self.data.paths()?;
        if self.data.max_vocab.is_some() && self.mode == Mode::Char {
            return Err(CliError::Config("data.max_vocab applies to word mode only".into()));
        }
        Ok(())
    }

    pub fn preprocess(&self) -> Preprocess {
        match self.mode {
            Mode::Word => Preprocess::word(self.data.max_vocab),
            Mode::Char => Preprocess::char(),
        }
    }

    /// The model configuration for a vocabulary of `vocab` types, with the
    /// trace noise seeded from the run seed.
    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        let mut m = self.model.clone();
        m.vocab = vocab;
        m.head.vocab = vocab;
        if let TraceMode::Hutchinson { samples, noise } = m.head.trace.mode {
            m.head.trace = TraceEstimator::hutchinson(samples, noise, self.seed);
        }
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn run_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}-{}-s{}", self.mode, self.model.head.kind, self.seed))
    }
}
