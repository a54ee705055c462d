//! Decomposed rewards for a four-stage incident chain.
//!
//! * structural: gated tag count
//! * knowledge: weighted expert-term coverage minus a perplexity penalty
//! * semantic: best cosine between the analysis+decision text and a reference set

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::cot::{order_gate, CotDocument, StageTag};
use crate::error::{arg, Error, Result};
use crate::policy::{conditional_logprob, TokenId, ToyPolicy};
use crate::text::{cosine, is_unit, normalize_term, Embedder, HashingEmbedder, PhraseNormalizer};
use crate::vocab::WordVocab;

pub const NUM_STAGES: usize = 4;
pub const DEFAULT_REFERENCE_K: usize = 5;

/// Gated tag count: number of present tags, or 0 when the order gate fails.
pub fn reward_struct(doc: &CotDocument) -> u32 {
    let present = doc.present_count() as u32;
    present * u32::from(order_gate(doc))
}

/// Expert terms for one stage, stored in joined single-token form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageVocabulary {
    pub stage: usize,
    pub terms: BTreeSet<String>,
    pub weight: f64,
}

impl StageVocabulary {
    pub fn new<I, S>(stage: usize, terms: I, weight: f64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        StageTag::from_index(stage)?;
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::Config(format!("stage weight {weight} must be finite and >= 0")));
        }
        let terms = terms
            .into_iter()
            .map(|t| normalize_term(t.as_ref()))
            .filter(|t| !t.is_empty())
            .collect();
        Ok(StageVocabulary { stage, terms, weight })
    }
}

/// One record of the vocabulary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub stage: usize,
    pub term: String,
    pub weight: f64,
}

/// Groups file entries into the four stage vocabularies. Stages with no
/// entries get an empty vocabulary of weight 1.
pub fn vocabularies_from_entries(entries: &[VocabEntry]) -> Result<[StageVocabulary; NUM_STAGES]> {
    let mut weights: BTreeMap<usize, f64> = BTreeMap::new();
    let mut terms: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for e in entries {
        StageTag::from_index(e.stage)?;
        if let Some(&w) = weights.get(&e.stage) {
            if w != e.weight {
                return Err(Error::Config(format!(
                    "stage {} has conflicting weights {w} and {}",
                    e.stage, e.weight
                )));
            }
        }
        weights.insert(e.stage, e.weight);
        terms.entry(e.stage).or_default().push(&e.term);
    }
    let build = |k: usize| {
        StageVocabulary::new(
            k,
            terms.get(&k).cloned().unwrap_or_default(),
            weights.get(&k).copied().unwrap_or(1.0),
        )
    };
    Ok([build(1)?, build(2)?, build(3)?, build(4)?])
}

pub fn vocabulary_entries(vocabs: &[StageVocabulary]) -> Vec<VocabEntry> {
    vocabs
        .iter()
        .flat_map(|v| {
            v.terms.iter().map(move |t| VocabEntry {
                stage: v.stage,
                term: t.clone(),
                weight: v.weight,
            })
        })
        .collect()
}

/// Normalizer that joins every multi-word term of the given vocabularies.
pub fn shared_normalizer(vocabs: &[StageVocabulary]) -> PhraseNormalizer {
    PhraseNormalizer::new(vocabs.iter().flat_map(|v| v.terms.iter()))
}

/// Top `top_n` stage-`k` terms by TF-IDF against the whole corpus.
///
/// TF is the raw count summed over stage-`k` documents; IDF is `ln(N / df)`
/// over all `N` documents. Ties go to the lexicographically smaller term.
pub fn build_stage_vocab(
    corpus: &[(usize, String)],
    k: usize,
    top_n: usize,
    normalizer: &PhraseNormalizer,
) -> Result<StageVocabulary> {
    StageTag::from_index(k)?;
    if top_n == 0 {
        return Err(arg("top_n must be at least 1"));
    }
    let docs: Vec<(usize, Vec<String>)> = corpus
        .iter()
        .map(|(stage, text)| (*stage, normalizer.tokens(text)))
        .collect();
    if !docs.iter().any(|(s, _)| *s == k) {
        return Err(Error::Config(format!("no documents for stage {k}")));
    }

    let mut df: HashMap<&str, usize> = HashMap::new();
    for (_, toks) in &docs {
        let uniq: BTreeSet<&str> = toks.iter().map(String::as_str).collect();
        for t in uniq {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for (_, toks) in docs.iter().filter(|(s, _)| *s == k) {
        for t in toks {
            *tf.entry(t.as_str()).or_insert(0) += 1;
        }
    }

    let n = docs.len() as f64;
    let mut scored: Vec<(&str, f64)> = tf
        .into_iter()
        .map(|(t, c)| (t, c as f64 * (n / df[t] as f64).ln()))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    scored.truncate(top_n);

    Ok(StageVocabulary {
        stage: k,
        terms: scored.into_iter().map(|(t, _)| t.to_string()).collect(),
        weight: 1.0,
    })
}

/// Fraction of distinct normalized tokens in segment `k` that are vocabulary terms.
pub fn coverage(doc: &CotDocument, vocab: &StageVocabulary, normalizer: &PhraseNormalizer) -> f64 {
    let Ok(tag) = StageTag::from_index(vocab.stage) else {
        return 0.0;
    };
    let Some(segment) = doc.segment(tag) else {
        return 0.0;
    };
    let distinct: BTreeSet<String> = normalizer.tokens(segment).into_iter().collect();
    if distinct.is_empty() {
        return 0.0;
    }
    let hits = distinct.iter().filter(|t| vocab.terms.contains(*t)).count();
    hits as f64 / distinct.len() as f64
}

/// `exp(-(1/T) sum_t log P(x_t | x_<t))` under the frozen reference model.
pub fn perplexity(tokens: &[TokenId], ref_model: &ToyPolicy) -> Result<f64> {
    if tokens.is_empty() {
        return Err(arg("perplexity of an empty sequence"));
    }
    let lp = conditional_logprob(ref_model, &[], tokens)?;
    Ok((-lp / tokens.len() as f64).exp())
}

/// Nearest-rank 95th percentile: the `ceil(0.95 n)`-th order statistic.
pub fn calibrate_tau(validation_ppls: &[f64]) -> Result<f64> {
    if validation_ppls.is_empty() {
        return Err(arg("no validation perplexities"));
    }
    let mut sorted = validation_ppls.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (95 * n).div_ceil(100).max(1);
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda_struct: f64,
    pub lambda_know: f64,
    pub lambda_sem: f64,
    /// Perplexity penalty slope.
    pub eta: f64,
    pub tau_ppl: f64,
    pub k_stages: usize,
    pub advantage_eps: f64,
    /// Size of the local reference set used by the semantic term.
    pub reference_k: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_struct: 0.25,
            lambda_know: 1.0,
            lambda_sem: 0.5,
            eta: 0.1,
            tau_ppl: 100.0,
            k_stages: NUM_STAGES,
            advantage_eps: 1e-8,
            reference_k: DEFAULT_REFERENCE_K,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_struct, self.lambda_know, self.lambda_sem, self.eta];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("reward weights must be finite and >= 0".into()));
        }
        if !(self.tau_ppl > 0.0) {
            return Err(Error::Config("tau_ppl must be positive".into()));
        }
        if self.k_stages == 0 {
            return Err(Error::Config("k_stages must be positive".into()));
        }
        if !(self.advantage_eps > 0.0) {
            return Err(Error::Config("advantage_eps must be positive".into()));
        }
        if self.reference_k == 0 {
            return Err(Error::Config("reference_k must be positive".into()));
        }
        Ok(())
    }
}

/// `(1/K) sum_k w_k coverage_k - eta * max(0, ppl - tau)`, with the perplexity
/// supplied by the caller.
pub fn reward_know_with_ppl(
    doc: &CotDocument,
    vocabs: &[StageVocabulary],
    normalizer: &PhraseNormalizer,
    ppl: f64,
    config: &RewardConfig,
) -> f64 {
    let cov: f64 = vocabs.iter().map(|v| v.weight * coverage(doc, v, normalizer)).sum();
    cov / config.k_stages as f64 - config.eta * (ppl - config.tau_ppl).max(0.0)
}

/// Knowledge reward with perplexity measured over the full output tokens.
pub fn reward_know(
    doc: &CotDocument,
    tokens: &[TokenId],
    vocabs: &[StageVocabulary],
    normalizer: &PhraseNormalizer,
    ref_model: &ToyPolicy,
    config: &RewardConfig,
) -> Result<f64> {
    if vocabs.len() != NUM_STAGES {
        return Err(arg(format!("expected {NUM_STAGES} vocabularies, got {}", vocabs.len())));
    }
    let ppl = perplexity(tokens, ref_model)?;
    Ok(reward_know_with_ppl(doc, vocabs, normalizer, ppl, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub text: String,
    pub embedding: Vec<f64>,
}

/// Expert records and teacher traces with their embeddings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReferenceStore {
    pub entries: Vec<ReferenceEntry>,
}

/// One line of a reference-store file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl ReferenceStore {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.embedding.len())
    }

    pub fn push(&mut self, text: impl Into<String>, embedding: Vec<f64>) -> Result<()> {
        if let Some(d) = self.dim() {
            if d != embedding.len() {
                return Err(Error::Shape(format!(
                    "reference embedding dim {} differs from store dim {d}",
                    embedding.len()
                )));
            }
        }
        self.entries.push(ReferenceEntry {
            text: text.into(),
            embedding,
        });
        Ok(())
    }

    pub fn add_text(&mut self, text: impl Into<String>, embedder: &dyn Embedder) -> Result<()> {
        let text = text.into();
        let emb = embedder.embed(&text);
        self.push(text, emb)
    }

    /// Builds a store from file records, embedding the ones that lack a vector.
    pub fn from_records(records: Vec<ReferenceRecord>, embedder: &dyn Embedder) -> Result<Self> {
        let mut store = ReferenceStore::default();
        for r in records {
            let emb = r.embedding.unwrap_or_else(|| embedder.embed(&r.text));
            store.push(r.text, emb)?;
        }
        Ok(store)
    }

    pub fn all_unit(&self) -> bool {
        self.entries.iter().all(|e| is_unit(&e.embedding))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceHit {
    pub index: usize,
    pub text: String,
    pub similarity: f64,
}

/// The `k` highest-cosine entries, descending; equal scores keep insertion order.
pub fn retrieve_ref(query: &[f64], store: &ReferenceStore, k: usize) -> Vec<ReferenceHit> {
    let mut hits: Vec<ReferenceHit> = store
        .entries
        .iter()
        .enumerate()
        .map(|(index, e)| ReferenceHit {
            index,
            text: e.text.clone(),
            similarity: cosine(query, &e.embedding),
        })
        .collect();
    // stable sort preserves insertion order among ties
    hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    hits.truncate(k);
    hits
}

/// Analysis and decision segments joined by one space; absent segments are empty.
pub fn analysis_decision_text(doc: &CotDocument) -> Option<String> {
    let s2 = doc.segment(StageTag::CausalInference);
    let s3 = doc.segment(StageTag::ResponseStrategy);
    if s2.is_none() && s3.is_none() {
        return None;
    }
    Some(format!("{} {}", s2.unwrap_or(""), s3.unwrap_or("")))
}

/// Best cosine between the analysis+decision text and the retrieved local
/// reference set. Zero when both segments are absent or the store is empty.
pub fn reward_sem(doc: &CotDocument, store: &ReferenceStore, k: usize, embedder: &dyn Embedder) -> f64 {
    let Some(text) = analysis_decision_text(doc) else {
        return 0.0;
    };
    let query = embedder.embed(&text);
    retrieve_ref(&query, store, k)
        .iter()
        .map(|h| h.similarity)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_struct: u32,
    pub r_know: f64,
    pub r_sem: f64,
    pub r_total: f64,
}

impl RewardBreakdown {
    pub fn combine(r_struct: u32, r_know: f64, r_sem: f64, config: &RewardConfig) -> Self {
        let r_total =
            config.lambda_struct * f64::from(r_struct) + config.lambda_know * r_know + config.lambda_sem * r_sem;
        RewardBreakdown {
            r_struct,
            r_know,
            r_sem,
            r_total,
        }
    }
}

/// Everything needed to score candidate text. Immutable once built.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub vocabs: [StageVocabulary; NUM_STAGES],
    pub normalizer: PhraseNormalizer,
    pub ref_model: ToyPolicy,
    pub words: WordVocab,
    pub store: ReferenceStore,
    pub embedder: HashingEmbedder,
    pub config: RewardConfig,
}

impl RewardModel {
    pub fn new(
        vocabs: [StageVocabulary; NUM_STAGES],
        ref_model: ToyPolicy,
        words: WordVocab,
        store: ReferenceStore,
        embedder: HashingEmbedder,
        config: RewardConfig,
    ) -> Result<Self> {
        config.validate()?;
        if words.len() != ref_model.vocab_size {
            return Err(Error::Config(format!(
                "word list has {} entries but reference model vocabulary is {}",
                words.len(),
                ref_model.vocab_size
            )));
        }
        if let Some(d) = store.dim() {
            if d != embedder.dim {
                return Err(Error::Config(format!(
                    "reference store dim {d} differs from embedder dim {}",
                    embedder.dim
                )));
            }
        }
        Ok(RewardModel {
            normalizer: shared_normalizer(&vocabs),
            vocabs,
            ref_model,
            words,
            store,
            embedder,
            config,
        })
    }

    pub fn score_text(&self, text: &str) -> Result<RewardBreakdown> {
        let tokens = self.words.encode(text)?;
        self.score(text, &tokens)
    }

    /// Scores text whose reference-model tokenization is already known.
    pub fn score(&self, text: &str, tokens: &[TokenId]) -> Result<RewardBreakdown> {
        let doc = crate::cot::parse_cot(text);
        reward_total(
            &doc,
            tokens,
            &self.vocabs,
            &self.normalizer,
            &self.ref_model,
            &self.store,
            &self.embedder,
            &self.config,
        )
    }
}

/// All three terms and their weighted sum.
#[allow(clippy::too_many_arguments)]
pub fn reward_total(
    doc: &CotDocument,
    tokens: &[TokenId],
    vocabs: &[StageVocabulary],
    normalizer: &PhraseNormalizer,
    ref_model: &ToyPolicy,
    store: &ReferenceStore,
    embedder: &dyn Embedder,
    config: &RewardConfig,
) -> Result<RewardBreakdown> {
    config.validate()?;
    let r_struct = reward_struct(doc);
    let r_know = reward_know(doc, tokens, vocabs, normalizer, ref_model, config)?;
    let r_sem = reward_sem(doc, store, config.reference_k, embedder);
    Ok(RewardBreakdown::combine(r_struct, r_know, r_sem, config))
}
