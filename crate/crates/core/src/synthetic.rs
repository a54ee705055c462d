//! Seeded synthetic corpora: tag emission, stage vocabulary mining and
//! knowledge-graph ingestion.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cot::{parse_cot, StageTag};
use crate::error::{Error, Result};
use crate::policy::{SampleOptions, TokenId};
use crate::reward::reward_struct;
use crate::vocab::WordVocab;

pub const EOS: &str = "<eos>";

/// Filler words for the tag-emission vocabulary.
const FILLER: [&str; 16] = [
    "fog", "snow", "truck", "ramp", "bridge", "tunnel", "crash", "spill", "close", "divert", "clear", "lane", "queue",
    "smoke", "tow", "delay",
];

/// Filler words in the default tag-emission task.
const TASK_FILLER: usize = 11;

/// Expert terms per stage used to seed the vocabulary-mining corpus.
pub const STAGE_TERMS: [&[&str]; 4] = [
    &[
        "multi-vehicle pileup",
        "hazardous chemical leakage",
        "occupying emergency lane",
        "visibility range",
        "traffic volume saturation",
        "fire spreading",
    ],
    &[
        "secondary accident risk",
        "chain reaction",
        "brake failure",
        "fatigue driving",
        "lane capacity reduction",
        "danger radius",
    ],
    &[
        "remote diversion",
        "upstream interception",
        "green wave control",
        "air-ground coordination",
        "break-bulk transport",
        "gating control",
    ],
    &[
        "residual congestion",
        "rescue efficiency",
        "public sentiment monitoring",
        "secondary damage assessment",
    ],
];

const GENERAL_WORDS: [&str; 16] = [
    "the",
    "a",
    "on",
    "near",
    "with",
    "and",
    "section",
    "expressway",
    "report",
    "vehicle",
    "team",
    "site",
    "minutes",
    "after",
    "toward",
    "current",
];

/// The toy task where a policy must learn to emit the four stage tags in order.
#[derive(Debug, Clone)]
pub struct TagEmissionTask {
    pub words: WordVocab,
    pub queries: Vec<Vec<TokenId>>,
    pub sampling: SampleOptions,
}

impl TagEmissionTask {
    pub fn new() -> Self {
        Self::with_size(TASK_FILLER, 16)
    }

    /// Task with the first `filler` filler words and `n_queries` two-word prompts.
    pub fn with_size(filler: usize, n_queries: usize) -> Self {
        let filler = &FILLER[..filler.clamp(2, FILLER.len())];
        let mut words: Vec<String> = StageTag::ALL.iter().map(|t| t.token_text().to_string()).collect();
        words.push(EOS.to_string());
        words.extend(filler.iter().map(|w| w.to_string()));
        let words = WordVocab::from(words);
        let first = words.len() - filler.len();
        let queries = (0..n_queries.max(1))
            .map(|i| {
                let a = first + i % filler.len();
                let b = first + (i + 1 + i / filler.len()) % filler.len();
                vec![a as TokenId, b as TokenId]
            })
            .collect();
        let sampling = SampleOptions {
            max_len: 12,
            temperature: 1.0,
            stop_token: words.id(EOS),
        };
        TagEmissionTask {
            words,
            queries,
            sampling,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Text of a response with the end marker dropped.
    pub fn response_text(&self, response: &[TokenId]) -> Result<String> {
        let eos = self.words.id(EOS);
        let kept: Vec<TokenId> = response.iter().copied().filter(|&t| Some(t) != eos).collect();
        self.words.decode(&kept)
    }

    /// Structural reward of a response.
    pub fn struct_reward(&self, response: &[TokenId]) -> Result<f64> {
        Ok(f64::from(reward_struct(&parse_cot(&self.response_text(response)?))))
    }
}

impl Default for TagEmissionTask {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    TagEmission,
    VocabCoverage,
    KgCorpus,
}

impl std::str::FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tag-emission" => Ok(SyntheticTask::TagEmission),
            "vocab-coverage" => Ok(SyntheticTask::VocabCoverage),
            "kg-corpus" => Ok(SyntheticTask::KgCorpus),
            other => Err(Error::Config(format!("unknown synthetic task {other:?}"))),
        }
    }
}

/// A canonical four-stage chain record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotRecord {
    pub text: String,
}

/// One stage-labelled document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDoc {
    pub stage: usize,
    pub text: String,
}

/// One knowledge-graph ingestion document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub text: String,
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty word list")
}

fn filler_run<R: Rng>(rng: &mut R, xs: &[&str], lo: usize, hi: usize) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| pick(rng, xs)).collect::<Vec<_>>().join(" ")
}

/// Canonical chains in the tag-emission vocabulary.
pub fn tag_emission_records(seed: u64, count: usize) -> Vec<CotRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let text = StageTag::ALL
                .iter()
                .map(|t| {
                    format!(
                        "{} {}",
                        t.token_text(),
                        filler_run(&mut rng, &FILLER[..TASK_FILLER], 1, 4)
                    )
                })
                .collect::<Vec<_>>()
                .join(" ");
            CotRecord { text }
        })
        .collect()
}

/// Stage-labelled documents mixing each stage's expert terms with general words.
pub fn vocab_coverage_docs(seed: u64, count: usize) -> Vec<StageDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let stage = i % 4 + 1;
            let terms = STAGE_TERMS[stage - 1];
            let parts: Vec<String> = (0..rng.random_range(3..=6))
                .map(|_| {
                    format!(
                        "{} {}",
                        filler_run(&mut rng, &GENERAL_WORDS, 1, 3),
                        pick(&mut rng, terms)
                    )
                })
                .collect();
            StageDoc {
                stage,
                text: parts.join(" "),
            }
        })
        .collect()
}

/// Gazetteer of the knowledge-graph corpus.
pub fn kg_gazetteer() -> Vec<String> {
    let mut g: Vec<String> = STAGE_TERMS
        .iter()
        .flat_map(|t| t.iter().map(|s| s.to_string()))
        .collect();
    g.extend(
        [
            "long queue",
            "red-green light",
            "traffic congestion",
            "signal control",
            "heavy fog",
            "traffic accident",
            "accident",
            "toll station",
            "service area",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    g
}

/// Colloquial term to topic label, as used for global keywords.
pub fn kg_topic_map() -> BTreeMap<String, String> {
    [
        ("long queue", "traffic congestion"),
        ("red-green light", "signal control"),
        ("residual congestion", "traffic congestion"),
        ("traffic volume saturation", "traffic congestion"),
        ("green wave control", "signal control"),
        ("gating control", "signal control"),
        ("multi-vehicle pileup", "traffic accident"),
        ("heavy fog", "visibility range"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

/// Documents of several sentences, each naming two or three gazetteer terms.
pub fn kg_corpus_docs(seed: u64, count: usize) -> Vec<CorpusDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaz = kg_gazetteer();
    let gaz: Vec<&str> = gaz.iter().map(String::as_str).collect();
    (0..count)
        .map(|i| {
            let sentences: Vec<String> = (0..rng.random_range(2..=4))
                .map(|_| {
                    let mut s = format!("The {}", pick(&mut rng, &GENERAL_WORDS));
                    for _ in 0..rng.random_range(2..=3) {
                        s.push_str(&format!(" {} {}", pick(&mut rng, &gaz), pick(&mut rng, &GENERAL_WORDS)));
                    }
                    s.push('.');
                    s
                })
                .collect();
            CorpusDoc {
                doc_id: format!("doc-{i:04}"),
                text: sentences.join(" "),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_vocab_fits_limits() {
        let t = TagEmissionTask::new();
        assert_eq!(t.vocab_size(), 16);
        assert!(t.sampling.max_len <= 64);
        assert_eq!(t.queries.len(), 16);
        let distinct: std::collections::BTreeSet<_> = t.queries.iter().collect();
        assert_eq!(distinct.len(), 16);
        let ids = t.words.encode("[Incident Description] fog [Causal Inference]").unwrap();
        assert_eq!(ids, vec![0, 5, 1]);
    }

    #[test]
    fn canonical_records_score_four() {
        let t = TagEmissionTask::new();
        for r in tag_emission_records(3, 20) {
            assert_eq!(reward_struct(&parse_cot(&r.text)), 4);
            assert!(t.words.encode(&r.text).is_ok());
        }
    }

    #[test]
    fn eos_dropped_from_text() {
        let t = TagEmissionTask::new();
        let eos = t.words.id(EOS).unwrap();
        let resp = vec![0, 1, 2, 3, eos];
        assert_eq!(t.struct_reward(&resp).unwrap(), 4.0);
        assert!(!t.response_text(&resp).unwrap().contains(EOS));
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(kg_corpus_docs(1, 5), kg_corpus_docs(1, 5));
        assert_ne!(kg_corpus_docs(1, 5), kg_corpus_docs(2, 5));
        assert_eq!(vocab_coverage_docs(4, 8), vocab_coverage_docs(4, 8));
        assert!(tag_emission_records(0, 0).is_empty());
        assert!("bogus".parse::<SyntheticTask>().is_err());
    }
}
