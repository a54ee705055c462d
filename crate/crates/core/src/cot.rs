//! Four-stage incident chain parsing.
//!
//! Generated text is scanned for the four stage delimiters. Each tag's
//! position is the byte offset of its first occurrence, or [`TagPosition::Absent`]
//! when the tag never appears. Absent compares greater than every real
//! offset, and two absent tags are never strictly ordered.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

/// One of the four reasoning-stage delimiters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageTag {
    IncidentDescription,
    CausalInference,
    ResponseStrategy,
    StrategyEvaluation,
}

impl StageTag {
    pub const ALL: [StageTag; 4] = [
        StageTag::IncidentDescription,
        StageTag::CausalInference,
        StageTag::ResponseStrategy,
        StageTag::StrategyEvaluation,
    ];

    /// Stage index `k` in `1..=4`.
    pub fn index(self) -> usize {
        match self {
            StageTag::IncidentDescription => 1,
            StageTag::CausalInference => 2,
            StageTag::ResponseStrategy => 3,
            StageTag::StrategyEvaluation => 4,
        }
    }

    pub fn from_index(k: usize) -> Result<StageTag> {
        match k {
            1..=4 => Ok(StageTag::ALL[k - 1]),
            _ => Err(arg(format!("stage index {k} outside 1..=4"))),
        }
    }

    /// Exact control-token string.
    pub fn token_text(self) -> &'static str {
        match self {
            StageTag::IncidentDescription => "[Incident Description]",
            StageTag::CausalInference => "[Causal Inference]",
            StageTag::ResponseStrategy => "[Response Strategy Formulation]",
            StageTag::StrategyEvaluation => "[Strategy Evaluation]",
        }
    }
}

/// Position of a tag in the raw text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagPosition {
    At(usize),
    Absent,
}

impl TagPosition {
    pub fn is_present(self) -> bool {
        matches!(self, TagPosition::At(_))
    }

    pub fn offset(self) -> Option<usize> {
        match self {
            TagPosition::At(p) => Some(p),
            TagPosition::Absent => None,
        }
    }

    /// Strict `<` with absent acting as +infinity; `Absent < Absent` is false.
    pub fn strictly_before(self, other: TagPosition) -> bool {
        self.compare(other) == Some(Ordering::Less)
    }

    fn compare(self, other: TagPosition) -> Option<Ordering> {
        match (self, other) {
            (TagPosition::At(a), TagPosition::At(b)) => Some(a.cmp(&b)),
            (TagPosition::At(_), TagPosition::Absent) => Some(Ordering::Less),
            (TagPosition::Absent, TagPosition::At(_)) => Some(Ordering::Greater),
            // infinity is not strictly less than infinity
            (TagPosition::Absent, TagPosition::Absent) => None,
        }
    }
}

/// A parsed candidate output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotDocument {
    pub raw_text: String,
    /// Keyed by stage index 1..=4.
    pub tag_positions: BTreeMap<usize, TagPosition>,
    /// Present only for stages whose tag was found.
    pub segments: BTreeMap<usize, String>,
}

/// Parse text into tag positions and stage segments. Never fails.
pub fn parse_cot(text: &str) -> CotDocument {
    let mut tag_positions = BTreeMap::new();
    let mut present: Vec<(usize, StageTag)> = Vec::new();
    for tag in StageTag::ALL {
        let pos = match text.find(tag.token_text()) {
            Some(p) => {
                present.push((p, tag));
                TagPosition::At(p)
            }
            None => TagPosition::Absent,
        };
        tag_positions.insert(tag.index(), pos);
    }
    present.sort();

    // A segment runs to the next present tag in text order, whatever its index.
    let mut segments = BTreeMap::new();
    for (i, &(pos, tag)) in present.iter().enumerate() {
        let start = pos + tag.token_text().len();
        let end = present.get(i + 1).map_or(text.len(), |&(next, _)| next);
        let end = end.max(start);
        segments.insert(tag.index(), text[start..end].to_string());
    }

    CotDocument {
        raw_text: text.to_string(),
        tag_positions,
        segments,
    }
}

impl CotDocument {
    pub fn position(&self, tag: StageTag) -> TagPosition {
        self.tag_positions
            .get(&tag.index())
            .copied()
            .unwrap_or(TagPosition::Absent)
    }

    pub fn present_count(&self) -> usize {
        self.tag_positions.values().filter(|p| p.is_present()).count()
    }

    pub fn segment(&self, tag: StageTag) -> Option<&str> {
        self.segments.get(&tag.index()).map(String::as_str)
    }
}

/// `idx(S1) < idx(S2) < idx(S3) < idx(S4)` under the absent-is-infinity rule.
pub fn order_gate(doc: &CotDocument) -> bool {
    StageTag::ALL
        .windows(2)
        .all(|w| doc.position(w[0]).strictly_before(doc.position(w[1])))
}

/// Segment text for stage `k` (1..=4), `None` when its tag is absent.
pub fn stage_text(doc: &CotDocument, k: usize) -> Result<Option<&str>> {
    let tag = StageTag::from_index(k)?;
    Ok(doc.segment(tag))
}
