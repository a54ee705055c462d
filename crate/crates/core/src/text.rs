//! Text normalization, phrase joining, and the default hashed embedder.

use std::collections::BTreeSet;

/// Separator used when a multi-word phrase collapses into one token.
pub const PHRASE_JOINER: char = '_';

/// Lowercased word tokens. Letters, digits, `-` and `_` form words; everything
/// else separates them.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '_'))
        .map(|w| w.trim_matches('-').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Canonical single-token form of a term: `"Remote  Diversion"` -> `"remote_diversion"`.
pub fn normalize_term(term: &str) -> String {
    words(term).join(&PHRASE_JOINER.to_string())
}

/// Lowercase and collapse internal whitespace.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Tokenizer that joins known multi-word phrases into single tokens by
/// longest match, left to right.
#[derive(Debug, Clone, Default)]
pub struct PhraseNormalizer {
    phrases: BTreeSet<String>,
    max_words: usize,
}

impl PhraseNormalizer {
    pub fn new<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = PhraseNormalizer::default();
        for t in terms {
            out.add(t.as_ref());
        }
        out
    }

    /// Registers a phrase; `_`-joined terms are accepted in their joined form.
    pub fn add(&mut self, term: &str) {
        let ws = words(&term.replace(PHRASE_JOINER, " "));
        if ws.len() >= 2 {
            self.max_words = self.max_words.max(ws.len());
            self.phrases.insert(ws.join(&PHRASE_JOINER.to_string()));
        }
    }

    pub fn tokens(&self, text: &str) -> Vec<String> {
        let ws = words(text);
        let mut out = Vec::with_capacity(ws.len());
        let mut i = 0;
        while i < ws.len() {
            let longest = (2..=self.max_words.min(ws.len() - i)).rev().find_map(|n| {
                let joined = ws[i..i + n].join(&PHRASE_JOINER.to_string());
                self.phrases.contains(&joined).then_some((n, joined))
            });
            match longest {
                Some((n, joined)) => {
                    out.push(joined);
                    i += n;
                }
                None => {
                    out.push(ws[i].clone());
                    i += 1;
                }
            }
        }
        out
    }
}

/// Maps text to a fixed-dimension vector.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Feature-hashed term frequency followed by L2 normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    pub dim: usize,
}

pub const DEFAULT_EMBEDDING_DIM: usize = 256;

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder {
            dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for w in words(text) {
            v[self.bucket(&w)] += 1.0;
        }
        l2_normalize(&mut v);
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales in place to unit length; zero vectors stay zero.
pub fn l2_normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn is_unit(v: &[f64]) -> bool {
    (norm(v) - 1.0).abs() < 1e-9
}

/// Cosine similarity; zero if either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}
