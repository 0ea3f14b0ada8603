//! Discrete tokenizers for the four modality families: character, continuous
//! (quantile bins), class (one token per sample) and free text.
//!
//! Id layout is fixed for every kind: value tokens occupy `0..n`, followed by
//! `pad = n`, `mask = n + 1`, `unknown = n + 2`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default number of continuous bins.
pub const DEFAULT_BINS: usize = 100;

/// Flag carried by text tokenizers built with the whitespace/punctuation stub.
pub const TEXT_STUB_FLAG: &str = "text-stub";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Character,
    Continuous,
    Class,
    Text,
}

impl TokenizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerKind::Character => "character",
            TokenizerKind::Continuous => "continuous",
            TokenizerKind::Class => "class",
            TokenizerKind::Text => "text",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: u32,
    pub mask: u32,
    pub unknown: u32,
}

impl Specials {
    fn after(n: usize) -> Self {
        let n = n as u32;
        Specials {
            pad: n,
            mask: n + 1,
            unknown: n + 2,
        }
    }

    pub fn contains(&self, id: u32) -> bool {
        id == self.pad || id == self.mask || id == self.unknown
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub kind: TokenizerKind,
    pub vocab: Vec<String>,
    pub specials: Specials,
    #[serde(default)]
    pub bin_edges: Vec<f64>,
    #[serde(default)]
    pub bin_centers: Vec<f64>,
    #[serde(default)]
    pub flags: Vec<String>,
}

/// One raw observation of a modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RawValue {
    Symbol(String),
    Real(f64),
    Label(String),
    Text(String),
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrack {
    pub modality: String,
    pub values: Vec<RawValue>,
}

impl RawTrack {
    pub fn new(modality: impl Into<String>, values: Vec<RawValue>) -> Self {
        Self {
            modality: modality.into(),
            values,
        }
    }

    /// Character track from a string, one symbol per `char`.
    pub fn from_chars(modality: impl Into<String>, s: &str) -> Self {
        Self::new(
            modality,
            s.chars().map(|c| RawValue::Symbol(c.to_string())).collect(),
        )
    }

    pub fn from_reals(modality: impl Into<String>, xs: &[f64]) -> Self {
        Self::new(modality, xs.iter().map(|&x| RawValue::Real(x)).collect())
    }
}

fn check_unique(symbols: &[String]) -> Result<()> {
    let mut seen = alloc::collections::BTreeSet::new();
    for s in symbols {
        if !seen.insert(s.as_str()) {
            return Err(Error::DuplicateSymbol(s.clone()));
        }
    }
    Ok(())
}

/// Character tokenizer over an ordered alphabet.
pub fn build_character_tokenizer<S: AsRef<str>>(alphabet: &[S]) -> Result<TokenizerSpec> {
    build_symbolic(alphabet, TokenizerKind::Character)
}

/// Class tokenizer over an ordered label set; encodes a whole sample to one token.
pub fn build_class_tokenizer<S: AsRef<str>>(labels: &[S]) -> Result<TokenizerSpec> {
    build_symbolic(labels, TokenizerKind::Class)
}

fn build_symbolic<S: AsRef<str>>(symbols: &[S], kind: TokenizerKind) -> Result<TokenizerSpec> {
    if symbols.is_empty() {
        return Err(Error::Empty("alphabet"));
    }
    let vocab: Vec<String> = symbols.iter().map(|s| s.as_ref().to_string()).collect();
    check_unique(&vocab)?;
    Ok(TokenizerSpec {
        kind,
        specials: Specials::after(vocab.len()),
        vocab,
        bin_edges: Vec::new(),
        bin_centers: Vec::new(),
        flags: Vec::new(),
    })
}

/// Bin index of `v` under half-open bins `[e[k-1], e[k])`, clamped at both ends.
pub fn bin_index(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|&e| e <= v)
}

/// Fits quantile bins on the finite entries of `samples`.
///
/// Edges are nearest-rank `k / n_bins` quantiles; centers are per-bin means of
/// the fitting samples.
pub fn fit_continuous_tokenizer(samples: &[f64], n_bins: usize) -> Result<TokenizerSpec> {
    if n_bins < 2 {
        return Err(invalid("continuous tokenizer needs at least 2 bins"));
    }
    let mut finite: Vec<f64> = samples.iter().copied().filter(|x| x.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Empty("no finite values to fit continuous tokenizer"));
    }
    if finite.len() < n_bins {
        return Err(invalid(format!(
            "{} finite values is fewer than {} bins",
            finite.len(),
            n_bins
        )));
    }
    finite.sort_by(f64::total_cmp);
    let n = finite.len();
    let edges: Vec<f64> = if finite[0] == finite[n - 1] {
        // constant sample: every edge sits just above it so it lands in bin 0
        alloc::vec![finite[0].next_up(); n_bins - 1]
    } else {
        (1..n_bins)
            .map(|k| {
                let rank = (k * n).div_ceil(n_bins);
                finite[rank - 1]
            })
            .collect()
    };

    let mut sums = alloc::vec![0.0f64; n_bins];
    let mut counts = alloc::vec![0usize; n_bins];
    for &v in &finite {
        let k = bin_index(&edges, v);
        sums[k] += v;
        counts[k] += 1;
    }
    let centers = (0..n_bins)
        .map(|k| {
            if counts[k] > 0 {
                // mean of values inside [lo, hi) stays inside; guard rounding
                let lo = if k == 0 { f64::NEG_INFINITY } else { edges[k - 1] };
                let hi = if k == n_bins - 1 { f64::INFINITY } else { edges[k] };
                let m = sums[k] / counts[k] as f64;
                if m < lo {
                    lo
                } else if m >= hi {
                    hi.next_down()
                } else {
                    m
                }
            } else if k == 0 {
                edges[0].next_down()
            } else {
                edges[k - 1]
            }
        })
        .collect();

    Ok(TokenizerSpec {
        kind: TokenizerKind::Continuous,
        vocab: (0..n_bins).map(|k| format!("bin{k}")).collect(),
        specials: Specials::after(n_bins),
        bin_edges: edges,
        bin_centers: centers,
        flags: Vec::new(),
    })
}

/// Splits text into words, then each word into alphanumeric runs and single
/// punctuation characters.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut start = None;
        for (i, c) in word.char_indices() {
            if c.is_alphanumeric() {
                if start.is_none() {
                    start = Some(i);
                }
            } else {
                if let Some(s) = start.take() {
                    out.push(&word[s..i]);
                }
                out.push(&word[i..i + c.len_utf8()]);
            }
        }
        if let Some(s) = start {
            out.push(&word[s..]);
        }
    }
    out
}

/// Fits the subword stub: every observed character (plain and `##`-continued)
/// plus the most frequent whole words, up to `max_words` of them.
pub fn fit_text_tokenizer<S: AsRef<str>>(
    texts: &[S],
    max_words: usize,
    min_count: usize,
) -> Result<TokenizerSpec> {
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut chars = alloc::collections::BTreeSet::new();
    for t in texts {
        for w in pretokenize(t.as_ref()) {
            *word_counts.entry(w).or_default() += 1;
            chars.extend(w.chars());
        }
    }
    if chars.is_empty() {
        return Err(Error::Empty("text corpus"));
    }
    let mut vocab: Vec<String> = Vec::new();
    for c in &chars {
        vocab.push(c.to_string());
    }
    for c in &chars {
        vocab.push(format!("##{c}"));
    }
    let mut words: Vec<(&str, usize)> = word_counts
        .into_iter()
        .filter(|(w, n)| *n >= min_count.max(1) && w.chars().count() > 1)
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    vocab.extend(words.into_iter().take(max_words).map(|(w, _)| w.to_string()));
    Ok(TokenizerSpec {
        kind: TokenizerKind::Text,
        specials: Specials::after(vocab.len()),
        vocab,
        bin_edges: Vec::new(),
        bin_centers: Vec::new(),
        flags: alloc::vec![TEXT_STUB_FLAG.to_string()],
    })
}

impl TokenizerSpec {
    pub fn n_values(&self) -> usize {
        self.vocab.len()
    }

    /// Value tokens plus the three specials.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + 3
    }

    pub fn lookup(&self, symbol: &str) -> Option<u32> {
        self.vocab.iter().position(|v| v == symbol).map(|i| i as u32)
    }

    /// Checks the structural invariants of a (possibly deserialized) spec.
    pub fn validate(&self) -> Result<()> {
        let n = self.vocab.len();
        if self.specials != Specials::after(n) {
            return Err(invalid("special ids must follow the value tokens as pad, mask, unknown"));
        }
        match self.kind {
            TokenizerKind::Continuous => {
                if n < 2 {
                    return Err(invalid("continuous tokenizer needs at least 2 bins"));
                }
                if self.bin_edges.len() != n - 1 || self.bin_centers.len() != n {
                    return Err(invalid("continuous tokenizer has inconsistent bin arrays"));
                }
                if self.bin_edges.windows(2).any(|w| !(w[0] <= w[1])) {
                    return Err(invalid("bin edges must be non-decreasing"));
                }
            }
            TokenizerKind::Character | TokenizerKind::Class | TokenizerKind::Text => {
                if n == 0 {
                    return Err(Error::Empty("vocabulary"));
                }
                check_unique(&self.vocab)?;
            }
        }
        Ok(())
    }

    fn mismatch(&self, v: &RawValue) -> Error {
        let got = match v {
            RawValue::Symbol(_) => "symbol",
            RawValue::Real(_) => "real",
            RawValue::Label(_) => "label",
            RawValue::Text(_) => "text",
            RawValue::Missing => "missing",
        };
        Error::KindMismatch {
            expected: self.kind.as_str(),
            got: got.to_string(),
        }
    }

    pub fn encode_real(&self, v: f64) -> u32 {
        if v.is_finite() {
            bin_index(&self.bin_edges, v) as u32
        } else {
            self.specials.unknown
        }
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(id) = self.lookup(word) {
            out.push(id);
            return;
        }
        // greedy longest-match-first over the fitted pieces
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < word.len() {
            let mut end = word.len();
            let mut found = None;
            while end > start {
                if word.is_char_boundary(end) {
                    let piece = &word[start..end];
                    let id = if start == 0 {
                        self.lookup(piece)
                    } else {
                        self.lookup(&format!("##{piece}"))
                    };
                    if id.is_some() {
                        found = id;
                        break;
                    }
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.specials.unknown);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Encodes a free-text string (text kind only).
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in pretokenize(text) {
            self.encode_word(w, &mut out);
        }
        out
    }

    pub fn encode(&self, track: &RawTrack) -> Result<Vec<u32>> {
        match self.kind {
            TokenizerKind::Character => track
                .values
                .iter()
                .map(|v| match v {
                    RawValue::Symbol(s) => Ok(self.lookup(s).unwrap_or(self.specials.unknown)),
                    RawValue::Missing => Ok(self.specials.unknown),
                    other => Err(self.mismatch(other)),
                })
                .collect(),
            TokenizerKind::Continuous => track
                .values
                .iter()
                .map(|v| match v {
                    RawValue::Real(x) => Ok(self.encode_real(*x)),
                    RawValue::Missing => Ok(self.specials.unknown),
                    other => Err(self.mismatch(other)),
                })
                .collect(),
            TokenizerKind::Class => match track.values.as_slice() {
                [RawValue::Label(l)] => Ok(alloc::vec![self.lookup(l).unwrap_or(self.specials.unknown)]),
                [RawValue::Missing] => Ok(alloc::vec![self.specials.unknown]),
                [other] => Err(self.mismatch(other)),
                _ => Err(invalid("class tracks hold exactly one value")),
            },
            TokenizerKind::Text => {
                let mut out = Vec::new();
                for v in &track.values {
                    match v {
                        RawValue::Text(t) => {
                            for w in pretokenize(t) {
                                self.encode_word(w, &mut out);
                            }
                        }
                        RawValue::Missing => out.push(self.specials.unknown),
                        other => return Err(self.mismatch(other)),
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn check_id(&self, id: u32) -> Result<()> {
        if (id as usize) < self.vocab_size() {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                id,
                size: self.vocab_size(),
            })
        }
    }

    /// Bin center for a continuous value token.
    pub fn center(&self, id: u32) -> Option<f64> {
        self.bin_centers.get(id as usize).copied()
    }

    pub fn decode(&self, modality: &str, ids: &[u32]) -> Result<RawTrack> {
        for &id in ids {
            self.check_id(id)?;
        }
        let n = self.vocab.len() as u32;
        let values = match self.kind {
            TokenizerKind::Character => ids
                .iter()
                .map(|&id| {
                    if id < n {
                        RawValue::Symbol(self.vocab[id as usize].clone())
                    } else {
                        RawValue::Missing
                    }
                })
                .collect(),
            TokenizerKind::Continuous => ids
                .iter()
                .map(|&id| {
                    if id < n {
                        RawValue::Real(self.bin_centers[id as usize])
                    } else {
                        RawValue::Missing
                    }
                })
                .collect(),
            TokenizerKind::Class => ids
                .iter()
                .map(|&id| {
                    if id < n {
                        RawValue::Label(self.vocab[id as usize].clone())
                    } else {
                        RawValue::Missing
                    }
                })
                .collect(),
            TokenizerKind::Text => {
                let mut text = String::new();
                let mut values = Vec::new();
                for &id in ids {
                    if id >= n {
                        if !text.is_empty() {
                            values.push(RawValue::Text(core::mem::take(&mut text)));
                        }
                        values.push(RawValue::Missing);
                        continue;
                    }
                    let piece = &self.vocab[id as usize];
                    if let Some(rest) = piece.strip_prefix("##") {
                        text.push_str(rest);
                    } else {
                        if !text.is_empty() {
                            text.push(' ');
                        }
                        text.push_str(piece);
                    }
                }
                if !text.is_empty() {
                    values.push(RawValue::Text(text));
                }
                values
            }
        };
        Ok(RawTrack::new(modality, values))
    }
}
