//! Whitespace tokenizer with an explicit word list.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TokenId;

/// Maps surface strings to token ids. A surface may contain spaces (the stage
/// tags do); encoding matches the longest run of whitespace-separated words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    max_words: usize,
}

impl From<Vec<String>> for WordVocab {
    fn from(words: Vec<String>) -> Self {
        let mut index = HashMap::with_capacity(words.len());
        let mut max_words = 1;
        for (i, w) in words.iter().enumerate() {
            index.entry(w.clone()).or_insert(i as TokenId);
            max_words = max_words.max(w.split_whitespace().count());
        }
        WordVocab {
            words,
            index,
            max_words,
        }
    }
}

impl From<WordVocab> for Vec<String> {
    fn from(v: WordVocab) -> Self {
        v.words
    }
}

impl WordVocab {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        WordVocab::from(words.into_iter().map(Into::into).collect::<Vec<String>>())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        self.encode_inner(text, None)
    }

    /// Like [`encode`](Self::encode), but words not in the list become `unknown`.
    pub fn encode_lossy(&self, text: &str, unknown: TokenId) -> Vec<TokenId> {
        self.encode_inner(text, Some(unknown))
            .expect("fallback covers every word")
    }

    fn encode_inner(&self, text: &str, unknown: Option<TokenId>) -> Result<Vec<TokenId>> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        let mut out = Vec::with_capacity(parts.len());
        let mut i = 0;
        while i < parts.len() {
            let hit = (1..=self.max_words.min(parts.len() - i))
                .rev()
                .find_map(|n| self.id(&parts[i..i + n].join(" ")).map(|id| (n, id)));
            match hit {
                Some((n, id)) => {
                    out.push(id);
                    i += n;
                }
                None => match unknown {
                    Some(u) => {
                        out.push(u);
                        i += 1;
                    }
                    None => return Err(Error::UnknownWord(parts[i].to_string())),
                },
            }
        }
        Ok(out)
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        let words = tokens
            .iter()
            .map(|&t| {
                self.word(t).ok_or(Error::Vocabulary {
                    token: t,
                    vocab_size: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}
