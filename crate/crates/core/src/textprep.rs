//! Tokenization, character n-gram subwords, and per-language embedding
//! tables that compose a token vector from its word entry and hashed
//! subword buckets.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::numerics::{GatherSource, Tape, Tensor2D, Var};

/// The four textual sources of a news sample, in their fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Caption,
    Body,
    Headline,
    Lead,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Caption, Source::Body, Source::Headline, Source::Lead];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Caption => "caption",
            Source::Body => "body",
            Source::Headline => "headline",
            Source::Lead => "lead",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "caption" => Ok(Source::Caption),
            "body" => Ok(Source::Body),
            "headline" => Ok(Source::Headline),
            "lead" => Ok(Source::Lead),
            other => Err(Error::Unknown {
                kind: "source",
                name: other.to_string(),
            }),
        }
    }
}

/// Per-source token limits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub short: usize,
    pub body: usize,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation { short: 64, body: 256 }
    }
}

impl Truncation {
    pub fn limit(&self, source: Source) -> usize {
        match source {
            Source::Body => self.body,
            _ => self.short,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub language: String,
    pub source: Source,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn split_normalized(text: &str) -> Vec<String> {
    let folded: String = text.nfc().collect::<String>().to_lowercase();
    folded
        .split(|c: char| !c.is_alphanumeric())
        .filter(|p| !p.is_empty())
        .map(str::to_string)
        .collect()
}

/// NFC-normalizes, lowercases, and splits on every codepoint that is not a
/// letter or digit, keeping at most the default limit for `source`.
pub fn tokenize(text: &str, source: Source, language: &str) -> TokenSequence {
    tokenize_with(text, source, language, &Truncation::default())
}

pub fn tokenize_with(text: &str, source: Source, language: &str, limits: &Truncation) -> TokenSequence {
    let mut tokens = split_normalized(text);
    tokens.truncate(limits.limit(source));
    TokenSequence {
        tokens,
        language: language.to_string(),
        source,
    }
}

pub fn tokenize_bytes(bytes: &[u8], source: Source, language: &str) -> Result<TokenSequence> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Encoding)?;
    Ok(tokenize(text, source, language))
}

/// Casefolded, diacritic-free form used to compare entity names.
pub fn normalize_entity(s: &str) -> String {
    s.nfkd()
        .filter(|c| !is_combining_mark(*c))
        .collect::<String>()
        .to_lowercase()
}

/// Tokens of `s` after entity normalization.
pub fn entity_tokens(s: &str) -> Vec<String> {
    split_normalized(&normalize_entity(s))
}

/// The boundary-wrapped token plus all of its substrings of 4, 5 and 6
/// characters.
pub fn extract_subwords(token: &str) -> BTreeSet<String> {
    let wrapped: Vec<char> = format!("<{token}>").chars().collect();
    let mut out = BTreeSet::new();
    out.insert(wrapped.iter().collect());
    for n in 3..=5 {
        let width = n + 1;
        if wrapped.len() < width {
            continue;
        }
        for start in 0..=wrapped.len() - width {
            out.insert(wrapped[start..start + width].iter().collect());
        }
    }
    out
}

/// 64-bit FNV-1a.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub const DEFAULT_BUCKETS: usize = 65_536;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    pub buckets: usize,
    pub subwords: bool,
    pub seed: u64,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig {
            buckets: DEFAULT_BUCKETS,
            subwords: true,
            seed: 0,
        }
    }
}

const SRC_WORDS: usize = 0;
const SRC_BANK: usize = 1;
const SRC_UNK: usize = 2;

/// Word vectors plus a hashed subword bank for one language.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    language: String,
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    words: Tensor2D,
    bank: Tensor2D,
    unk: Tensor2D,
    subwords: bool,
    pub frozen: bool,
    names: [String; 3],
}

impl EmbeddingTable {
    /// A table with no word entries and a seeded bank, U(±0.5/w).
    pub fn new(language: &str, dim: usize, cfg: &TableConfig) -> Result<Self> {
        if cfg.buckets == 0 {
            return Err(Error::Config("subword bank needs at least one bucket".into()));
        }
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(language));
        let limit = 0.5 / dim as f64;
        let bank = Tensor2D::uniform(cfg.buckets, dim, limit, &mut rng);
        Ok(Self::from_parts(
            language,
            Vec::new(),
            Tensor2D::zeros(0, dim),
            bank,
            Tensor2D::zeros(1, dim),
            cfg.subwords,
        )?)
    }

    pub fn from_parts(
        language: &str,
        tokens: Vec<String>,
        words: Tensor2D,
        bank: Tensor2D,
        unk: Tensor2D,
        subwords: bool,
    ) -> Result<Self> {
        let dim = bank.cols();
        if bank.rows() == 0 {
            return Err(Error::Config("subword bank needs at least one bucket".into()));
        }
        if words.rows() != tokens.len() || (words.cols() != dim && !tokens.is_empty()) || unk.shape() != (1, dim) {
            return Err(Error::shape(
                "embedding table",
                format!(
                    "{} tokens, words {:?}, bank {:?}, unk {:?}",
                    tokens.len(),
                    words.shape(),
                    bank.shape(),
                    unk.shape()
                ),
            ));
        }
        let words = if tokens.is_empty() { Tensor2D::zeros(0, dim) } else { words };
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i);
        }
        if index.len() != tokens.len() {
            return Err(Error::Config("duplicate token in embedding table".into()));
        }
        Ok(EmbeddingTable {
            language: language.to_string(),
            dim,
            tokens,
            index,
            words,
            bank,
            unk,
            subwords,
            frozen: false,
            names: Self::param_names(language),
        })
    }

    pub fn param_names(language: &str) -> [String; 3] {
        [
            format!("emb.{language}.words"),
            format!("emb.{language}.bank"),
            format!("emb.{language}.unk"),
        ]
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    /// Renames the table, e.g. when it replaces another language's table.
    pub fn set_language(&mut self, language: &str) {
        self.language = language.to_string();
        self.names = Self::param_names(language);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn buckets(&self) -> usize {
        self.bank.rows()
    }

    pub fn uses_subwords(&self) -> bool {
        self.subwords
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn words(&self) -> &Tensor2D {
        &self.words
    }

    pub fn bank(&self) -> &Tensor2D {
        &self.bank
    }

    pub fn unk(&self) -> &Tensor2D {
        &self.unk
    }

    pub fn names(&self) -> &[String; 3] {
        &self.names
    }

    pub fn word_vector(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.words.row(i))
    }

    /// Inserts or overwrites a word entry.
    pub fn set_word(&mut self, token: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::shape(
                "set_word",
                format!("vector of {} for dim {}", vector.len(), self.dim),
            ));
        }
        match self.index.get(token) {
            Some(&i) => self.words.row_mut(i).copy_from_slice(vector),
            None => {
                self.index.insert(token.to_string(), self.tokens.len());
                self.tokens.push(token.to_string());
                self.words.push_row(vector)?;
            }
        }
        Ok(())
    }

    pub fn set_bank(&mut self, bank: Tensor2D) -> Result<()> {
        if bank.cols() != self.dim || bank.rows() == 0 {
            return Err(Error::shape("set_bank", format!("bank {:?} for dim {}", bank.shape(), self.dim)));
        }
        self.bank = bank;
        Ok(())
    }

    fn bucket(&self, gram: &str) -> usize {
        (fnv1a(gram) % self.bank.rows() as u64) as usize
    }

    /// `(source, row)` members whose mean is the token's embedding.
    pub(crate) fn members(&self, token: &str) -> Vec<(usize, usize)> {
        if !self.subwords {
            return match self.index.get(token) {
                Some(&i) => vec![(SRC_WORDS, i)],
                None => vec![(SRC_UNK, 0)],
            };
        }
        let full = format!("<{token}>");
        extract_subwords(token)
            .into_iter()
            .map(|g| {
                if g == full {
                    if let Some(&i) = self.index.get(token) {
                        return (SRC_WORDS, i);
                    }
                }
                (SRC_BANK, self.bucket(&g))
            })
            .collect()
    }

    fn source(&self, s: usize) -> &Tensor2D {
        match s {
            SRC_WORDS => &self.words,
            SRC_BANK => &self.bank,
            _ => &self.unk,
        }
    }

    /// Mean of the word entry (or its bucket) and every subword bucket.
    pub fn embed_token(&self, token: &str) -> Vec<f64> {
        let members = self.members(token);
        let mut out = vec![0.0; self.dim];
        let w = 1.0 / members.len() as f64;
        for (s, i) in members {
            for (o, v) in out.iter_mut().zip(self.source(s).row(i)) {
                *o += w * v;
            }
        }
        out
    }

    /// One row per token; an empty sequence gives a `0×w` tensor.
    pub fn embed_sequence(&self, seq: &TokenSequence) -> Tensor2D {
        let mut out = Tensor2D::zeros(0, self.dim);
        for t in &seq.tokens {
            out.push_row(&self.embed_token(t)).expect("width matches");
        }
        out
    }

    /// Records the lookup of `tokens` on `tape`, producing an `l×w` node.
    pub fn gather<'a>(&'a self, tape: &mut Tape<'a>, tokens: &[String]) -> Result<Var> {
        let trainable = !self.frozen;
        let sources = vec![
            GatherSource {
                name: &self.names[0],
                value: &self.words,
                trainable,
            },
            GatherSource {
                name: &self.names[1],
                value: &self.bank,
                trainable,
            },
            GatherSource {
                name: &self.names[2],
                value: &self.unk,
                trainable,
            },
        ];
        let rows = tokens.iter().map(|t| self.members(t)).collect();
        tape.gather(sources, rows)
    }

    /// Adds an explicit entry for every token not yet in the vocabulary,
    /// initialized to its current composed embedding. Returns how many
    /// entries were added.
    pub fn extend_vocab<'t, I>(&mut self, tokens: I) -> Result<usize>
    where
        I: IntoIterator<Item = &'t str>,
    {
        if self.frozen {
            return Err(Error::Contract(format!(
                "cannot extend frozen table {}",
                self.language
            )));
        }
        let mut added = 0;
        for t in tokens {
            if t.is_empty() || self.index.contains_key(t) {
                continue;
            }
            let v = self.embed_token(t);
            self.set_word(t, &v)?;
            added += 1;
        }
        Ok(added)
    }

    /// Copy keeping only the word entries accepted by `keep`.
    pub fn restricted<F: Fn(&str) -> bool>(&self, keep: F) -> EmbeddingTable {
        let mut out = self.clone();
        out.tokens.clear();
        out.index.clear();
        out.words = Tensor2D::zeros(0, self.dim);
        for (i, t) in self.tokens.iter().enumerate() {
            if keep(t) {
                out.set_word(t, self.words.row(i)).expect("same dim");
            }
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&str, &mut Tensor2D); 3] {
        let [a, b, c] = &self.names;
        [(a, &mut self.words), (b, &mut self.bank), (c, &mut self.unk)]
    }

    pub(crate) fn tensors(&self) -> [(&str, &Tensor2D); 3] {
        let [a, b, c] = &self.names;
        [(a, &self.words), (b, &self.bank), (c, &self.unk)]
    }
}

impl crate::numerics::ParamSet for EmbeddingTable {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor2D, bool)) {
        for (n, t) in self.tensors() {
            f(n, t, self.frozen);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2D, bool)) {
        let frozen = self.frozen;
        for (n, t) in self.tensors_mut() {
            f(n, t, frozen);
        }
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor2D> {
        self.tensors_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Result of reading a `.vec` file.
#[derive(Debug)]
pub struct VecFile {
    pub table: EmbeddingTable,
    /// Tokens that appeared more than once (the last occurrence wins).
    pub duplicates: Vec<String>,
}

/// Reads the text `.vec` format: a `count dim` header, then one
/// `token v1 .. v_dim` line per word.
pub fn load_vec_file(path: &Path, language: &str, cfg: &TableConfig) -> Result<VecFile> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l?,
        None => return Err(parse_err(path, 1, "missing header")),
    };
    let mut parts = header.split_whitespace();
    let (count, dim) = match (parts.next(), parts.next(), parts.next()) {
        (Some(c), Some(d), None) => (
            c.parse::<usize>().map_err(|_| parse_err(path, 1, "bad count"))?,
            d.parse::<usize>().map_err(|_| parse_err(path, 1, "bad dimension"))?,
        ),
        _ => return Err(parse_err(path, 1, "header must be `count dim`")),
    };
    let mut table = EmbeddingTable::new(language, dim, cfg)?;
    let mut duplicates = Vec::new();
    let mut seen = 0;
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if seen == count {
            return Err(parse_err(path, lineno, format!("more than the {count} declared entries")));
        }
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let token = fields.next().ok_or_else(|| parse_err(path, lineno, "missing token"))?;
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, lineno, format!("non-numeric value: {e}")))?;
        if values.len() != dim {
            return Err(parse_err(
                path,
                lineno,
                format!("{} values, expected {dim}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, lineno, "non-finite value"));
        }
        if table.contains(token) {
            log::warn!("{}: duplicate token {token:?} on line {lineno}; keeping the last", path.display());
            duplicates.push(token.to_string());
        }
        table.set_word(token, &values)?;
        seen += 1;
    }
    if seen != count {
        return Err(parse_err(
            path,
            seen + 1,
            format!("header declares {count} entries, found {seen}"),
        ));
    }
    Ok(VecFile { table, duplicates })
}

pub fn write_vec_file(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{} {}", table.vocab_size(), table.dim())?;
    for (i, t) in table.tokens().iter().enumerate() {
        write!(w, "{t}")?;
        for v in table.words().row(i) {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

const SWB_MAGIC: &[u8; 4] = b"SWB1";

/// Reads a subword bank: `SWB1`, u32 buckets, u32 dim, then f32 values,
/// all little-endian.
pub fn read_subword_bank(path: &Path) -> Result<Tensor2D> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let err = |m: &str| parse_err(path, 0, m.to_string());
    if bytes.len() < 12 || &bytes[..4] != SWB_MAGIC {
        return Err(err("bad subword bank magic"));
    }
    let b = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != b * w * 4 {
        return Err(err("subword bank size does not match its header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor2D::from_vec(b, w, data)
}

pub fn write_subword_bank(bank: &Tensor2D, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SWB_MAGIC)?;
    w.write_all(&(bank.rows() as u32).to_le_bytes())?;
    w.write_all(&(bank.cols() as u32).to_le_bytes())?;
    for v in bank.data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}
