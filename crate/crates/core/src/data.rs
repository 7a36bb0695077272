//! Corpus ingestion: normalization, word and character vocabularies, and
//! BPTT windows over a contiguous id stream.
//!
//! Normalization lowercases, drops `\r`, and turns every newline into the
//! `<eos>` token. In word mode, whitespace-separated tokens matching
//! [`NUMBER_PATTERN`] become the placeholder `N`, and the vocabulary keeps
//! the `max_vocab` most frequent words (ties broken lexicographically); the
//! rest map to `<unk>`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const NUM: &str = "N";

/// Integer or decimal literal with optional sign and `,`/`.` grouping.
pub const NUMBER_PATTERN: &str = r"^[+-]?(\d+([.,]\d+)*|\d*\.\d+)$";

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(NUMBER_PATTERN).expect("valid pattern"))
}

pub fn is_number(token: &str) -> bool {
    number_re().is_match(token)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Word,
    Char,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Word => "word",
            Mode::Char => "char",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Mode::Word),
            "char" => Ok(Mode::Char),
            _ => Err(Error::Config(format!("unknown mode {s:?} (word|char)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    pub mode: Mode,
    /// Upper bound on non-special entries; `None` keeps everything.
    pub max_vocab: Option<usize>,
    /// Char mode only: apply the word-level number replacement before
    /// splitting into characters.
    pub word_filter: bool,
}

impl Preprocess {
    pub fn word(max_vocab: Option<usize>) -> Self {
        Self {
            mode: Mode::Word,
            max_vocab,
            word_filter: false,
        }
    }

    pub fn char() -> Self {
        Self {
            mode: Mode::Char,
            max_vocab: None,
            word_filter: false,
        }
    }
}

pub fn decode_utf8(bytes: &[u8]) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|e| Error::Encoding(e.to_string()))
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(decode_utf8(&bytes)
        .map_err(|e| Error::Encoding(format!("{}: {e}", path.display())))?
        .to_owned())
}

fn word_tokens(line: &str) -> impl Iterator<Item = String> + '_ {
    line.split_whitespace().map(|w| if is_number(w) { NUM.to_owned() } else { w.to_owned() })
}

/// Normalized token strings, `<eos>` in place of newlines.
pub fn tokenize(text: &str, opts: &Preprocess) -> Vec<String> {
    let text = text.to_lowercase().replace('\r', "");
    let mut out = Vec::new();
    let mut lines = text.split('\n').peekable();
    while let Some(line) = lines.next() {
        let newline = lines.peek().is_some();
        match opts.mode {
            Mode::Word => out.extend(word_tokens(line)),
            Mode::Char if opts.word_filter => {
                let words: Vec<String> = word_tokens(line).collect();
                out.extend(words.join(" ").chars().map(String::from));
            }
            Mode::Char => out.extend(line.chars().map(String::from)),
        }
        if newline {
            out.push(EOS.to_owned());
        }
    }
    out
}

/// Token/id bijection. Word mode reserves `<unk>`, `<eos>`, `N` as ids 0, 1,
/// 2; char mode reserves `<unk>` and `<eos>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    mode: Mode,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn specials(mode: Mode) -> &'static [&'static str] {
        match mode {
            Mode::Word => &[UNK, EOS, NUM],
            Mode::Char => &[UNK, EOS],
        }
    }

    fn from_tokens(mode: Mode, tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        for (i, s) in Self::specials(mode).iter().enumerate() {
            if index.get(*s) != Some(&i) {
                return Err(Error::Format(format!("special {s} must have id {i}")));
            }
        }
        Ok(Self { mode, tokens, index })
    }

    /// Keeps the `max` most frequent non-special tokens.
    pub fn build(tokens: &[String], mode: Mode, max: Option<usize>) -> Self {
        let specials = Self::specials(mode);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            if !specials.contains(&t.as_str()) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max.unwrap_or(usize::MAX));
        let all = specials
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_owned()))
            .collect();
        Self::from_tokens(mode, all).expect("built vocabulary is consistent")
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn num(&self) -> Option<usize> {
        (self.mode == Mode::Word).then_some(2)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::OutOfRange { index: id, extent: self.len() })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t).unwrap_or(0)).collect()
    }

    pub fn encode_text(&self, text: &str, opts: &Preprocess) -> Vec<usize> {
        self.encode(&tokenize(text, opts))
    }

    /// Word mode joins tokens by single spaces within a line; char mode
    /// concatenates.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut line_start = true;
        for &id in ids {
            let t = self.token(id)?;
            if t == EOS {
                out.push('\n');
                line_start = true;
                continue;
            }
            if self.mode == Mode::Word && !line_start {
                out.push(' ');
            }
            out.push_str(t);
            line_start = false;
        }
        Ok(out)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path, mode: Mode) -> Result<Self> {
        let text = read_text(path)?;
        let body = text.strip_suffix('\n').unwrap_or(&text);
        Self::from_tokens(mode, body.split('\n').map(String::from).collect())
    }
}

/// Builds the vocabulary from `text` and encodes it.
pub fn preprocess(text: &str, opts: &Preprocess) -> (Vocab, Vec<usize>) {
    let tokens = tokenize(text, opts);
    let vocab = Vocab::build(&tokens, opts.mode, opts.max_vocab);
    let ids = vocab.encode(&tokens);
    (vocab, ids)
}

/// Train/valid/test streams over a vocabulary built from train only.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Corpus {
    pub fn from_texts(train: &str, valid: &str, test: &str, opts: &Preprocess) -> Self {
        let (vocab, train) = preprocess(train, opts);
        let valid = vocab.encode_text(valid, opts);
        let test = vocab.encode_text(test, opts);
        Self { vocab, train, valid, test }
    }

    pub fn load(train: &Path, valid: &Path, test: &Path, opts: &Preprocess) -> Result<Self> {
        Ok(Self::from_texts(&read_text(train)?, &read_text(valid)?, &read_text(test)?, opts))
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split {name:?} (train|valid|test)"))),
        }
    }
}

/// The bundled sonnets, one per blank-line-separated block.
pub fn bundled_text() -> &'static str {
    include_str!("../data/sonnets.txt")
}

/// Splits blank-line-separated blocks into consecutive groups of the given
/// sizes (the last group takes the remainder).
pub fn split_blocks(text: &str, sizes: &[usize]) -> Vec<String> {
    let blocks: Vec<&str> = text
        .split("\n\n")
        .map(|b| b.trim_matches('\n'))
        .filter(|b| !b.trim().is_empty())
        .collect();
    let mut out = Vec::with_capacity(sizes.len() + 1);
    let mut at = 0;
    for &n in sizes {
        let end = (at + n).min(blocks.len());
        out.push(join_blocks(&blocks[at..end]));
        at = end;
    }
    out.push(join_blocks(&blocks[at..]));
    out
}

fn join_blocks(blocks: &[&str]) -> String {
    let mut s = blocks.join("\n\n");
    if !s.is_empty() {
        s.push('\n');
    }
    s
}

/// Sonnets 1-134 / 135-144 / 145-154.
pub fn bundled_splits() -> (String, String, String) {
    let mut parts = split_blocks(bundled_text(), &[134, 10]).into_iter();
    let train = parts.next().unwrap_or_default();
    let valid = parts.next().unwrap_or_default();
    let test = parts.next().unwrap_or_default();
    (train, valid, test)
}

/// Order-0 entropy of the id distribution, in nats.
pub fn unigram_entropy(ids: &[usize]) -> f64 {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &i in ids {
        *counts.entry(i).or_default() += 1;
    }
    let n = ids.len() as f64;
    counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// One BPTT window: `inputs` and `targets` are `[batch, seq]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Window {
    /// Column `s` of the inputs: one id per strip.
    pub fn inputs_at(&self, s: usize) -> Vec<usize> {
        (0..self.batch).map(|b| self.inputs[b * self.seq + s]).collect()
    }

    pub fn targets_at(&self, s: usize) -> Vec<usize> {
        (0..self.batch).map(|b| self.targets[b * self.seq + s]).collect()
    }
}

/// Contiguous strips of a stream walked in consecutive windows, so hidden
/// state can be carried from one window to the next.
#[derive(Clone, Debug)]
pub struct Batches {
    strips: Vec<Vec<usize>>,
    seq: usize,
    windows: usize,
}

pub fn batchify(stream: &[usize], batch: usize, seq: usize) -> Result<Batches> {
    if batch == 0 || seq == 0 {
        return Err(Error::InvalidArgument(format!("batch {batch} and bptt {seq} must be positive")));
    }
    let needed = batch * (seq + 1);
    if stream.len() < needed {
        return Err(Error::StreamTooShort { len: stream.len(), needed });
    }
    let strip = stream.len() / batch;
    let strips: Vec<Vec<usize>> = stream.chunks_exact(strip).take(batch).map(<[usize]>::to_vec).collect();
    Ok(Batches {
        strips,
        seq,
        windows: (strip - 1) / seq,
    })
}

impl Batches {
    pub fn len(&self) -> usize {
        self.windows
    }

    pub fn is_empty(&self) -> bool {
        self.windows == 0
    }

    pub fn batch(&self) -> usize {
        self.strips.len()
    }

    pub fn strips(&self) -> &[Vec<usize>] {
        &self.strips
    }

    pub fn window(&self, i: usize) -> Result<Window> {
        if i >= self.windows {
            return Err(Error::OutOfRange { index: i, extent: self.windows });
        }
        let (s, start) = (self.seq, i * self.seq);
        let mut inputs = Vec::with_capacity(self.batch() * s);
        let mut targets = Vec::with_capacity(self.batch() * s);
        for strip in &self.strips {
            inputs.extend_from_slice(&strip[start..start + s]);
            targets.extend_from_slice(&strip[start + 1..start + s + 1]);
        }
        Ok(Window {
            batch: self.batch(),
            seq: s,
            inputs,
            targets,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Window> + '_ {
        (0..self.windows).map(|i| self.window(i).expect("in range"))
    }

    /// Number of supervised positions over all windows.
    pub fn supervised_tokens(&self) -> usize {
        self.batch() * self.seq * self.windows
    }
}
