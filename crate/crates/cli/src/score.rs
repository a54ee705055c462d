use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use incident_align::policy::{Checkpoint, TokenId};
use incident_align::reward::{
    calibrate_tau, perplexity, vocabularies_from_entries, ReferenceRecord, ReferenceStore, RewardBreakdown,
    RewardConfig, RewardModel, VocabEntry,
};
use incident_align::text::HashingEmbedder;
use incident_align::vocab::WordVocab;

use crate::io::{self, CliError, CliResult};
use crate::{require_out, GlobalArgs, Outcome};

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// JSON Lines of {"text": ...}.
    #[arg(long)]
    pub input: PathBuf,
    /// JSON array of {"stage", "term", "weight"}.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Reference model: {"words", "unknown"?, "vocab_size", "order", "logits"}.
    #[arg(long)]
    pub ref_model: PathBuf,
    /// JSON Lines of {"text", "embedding"?}.
    #[arg(long)]
    pub ref_store: PathBuf,
    /// JSON Lines of {"text": ...}; sets the perplexity threshold from their perplexities.
    #[arg(long)]
    pub calibrate: Option<PathBuf>,
    #[arg(long, default_value_t = incident_align::text::DEFAULT_EMBEDDING_DIM)]
    pub embedding_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextRecord {
    pub text: String,
}

/// Reference language model with the word list that tokenizes text for it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefModelFile {
    pub words: WordVocab,
    /// Word that stands in for anything outside `words`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unknown: Option<String>,
    #[serde(flatten)]
    pub model: Checkpoint,
}

impl RefModelFile {
    fn tokenize(&self, text: &str) -> incident_align::Result<Vec<TokenId>> {
        match self.unknown.as_deref().and_then(|u| self.words.id(u)) {
            Some(unk) => Ok(self.words.encode_lossy(text, unk)),
            None => self.words.encode(text),
        }
    }
}

#[derive(Serialize)]
struct ScoredLine {
    line: usize,
    #[serde(flatten)]
    breakdown: RewardBreakdown,
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    reward: RewardConfig,
    tau_calibrated: bool,
    embedding_dim: usize,
    input: &'a Path,
    vocab: &'a Path,
    ref_model: &'a Path,
    ref_store: &'a Path,
    strict: bool,
}

#[derive(Serialize)]
struct Outputs<'a> {
    out: &'a Path,
    scored: usize,
    mean_total: f64,
}

pub fn run(g: &GlobalArgs, config: Option<&Value>, a: ScoreArgs) -> CliResult<Outcome> {
    let out = require_out(g, "score-cot")?;
    let mut reward = io::overlay(RewardConfig::default(), io::section(config, "reward"), "reward")?;
    if a.embedding_dim == 0 {
        return Err(CliError::Usage("--embedding-dim must be positive".into()));
    }

    let entries: Vec<VocabEntry> = io::read_json(&a.vocab)?;
    let vocabs = vocabularies_from_entries(&entries).map_err(|e| CliError::io(&a.vocab, e))?;
    let ref_file: RefModelFile = io::read_json(&a.ref_model)?;
    let ref_model = ref_file.model.policy().map_err(|e| CliError::io(&a.ref_model, e))?;
    let embedder = HashingEmbedder::new(a.embedding_dim);
    let store_lines = io::read_jsonl::<ReferenceRecord>(&a.ref_store, g.strict)?;
    let mut skipped = store_lines.skipped;
    let records = store_lines.records.into_iter().map(|(_, r)| r).collect();
    let store = ReferenceStore::from_records(records, &embedder).map_err(|e| CliError::io(&a.ref_store, e))?;

    let mut tau_calibrated = false;
    if let Some(path) = &a.calibrate {
        let mut lines = io::read_jsonl::<TextRecord>(path, g.strict)?;
        let mut ppls = Vec::new();
        for (n, r) in std::mem::take(&mut lines.records) {
            match ref_file.tokenize(&r.text).and_then(|t| perplexity(&t, &ref_model)) {
                Ok(p) => ppls.push(p),
                Err(e) => lines.reject(path, n, e.to_string(), g.strict)?,
            }
        }
        skipped.extend(lines.skipped);
        reward.tau_ppl = calibrate_tau(&ppls).map_err(|e| CliError::io(path, e))?;
        tau_calibrated = true;
    }

    let model = RewardModel::new(vocabs, ref_model, ref_file.words.clone(), store, embedder, reward)?;

    let mut input = io::read_jsonl::<TextRecord>(&a.input, g.strict)?;
    let mut scored = Vec::new();
    for (n, r) in std::mem::take(&mut input.records) {
        match ref_file.tokenize(&r.text).and_then(|t| model.score(&r.text, &t)) {
            Ok(b) => scored.push(ScoredLine { line: n, breakdown: b }),
            Err(e) => input.reject(&a.input, n, e.to_string(), g.strict)?,
        }
    }
    skipped.extend(input.skipped);
    io::write_text(&out, &io::jsonl(&scored))?;

    let mean_total = if scored.is_empty() {
        0.0
    } else {
        scored.iter().map(|s| s.breakdown.r_total).sum::<f64>() / scored.len() as f64
    };
    let resolved = ResolvedConfig {
        reward,
        tau_calibrated,
        embedding_dim: a.embedding_dim,
        input: &a.input,
        vocab: &a.vocab,
        ref_model: &a.ref_model,
        ref_store: &a.ref_store,
        strict: g.strict,
    };
    let outputs = Outputs {
        out: &out,
        scored: scored.len(),
        mean_total,
    };
    Ok(Outcome::new("score-cot", g, resolved, outputs, skipped))
}
