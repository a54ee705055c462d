//! Incrementally mergeable knowledge graph with dual-level retrieval.
//!
//! Nodes are domain terms keyed by their normalized text; edges are
//! co-occurrence relations between two terms. Each item carries a key, a set
//! of source snippets (its value), a key embedding and its provenance.
//! Documents become subgraphs that are merged into the index by set union,
//! followed by a similarity-based dedupe pass.
//!
//! Retrieval is split in two: concrete query terms are matched against node
//! keys, topic cues against edge keys.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::text::{collapse_whitespace, cosine, words, Embedder, HashingEmbedder, DEFAULT_EMBEDDING_DIM};

/// Canonical relation for co-occurring terms.
pub const RELATED_TO: &str = "related_to";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub embedding_dim: usize,
    pub dedup_threshold: f64,
    /// Character budget of a rendered value.
    pub value_budget: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            dedup_threshold: 0.95,
            value_budget: 512,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            return Err(Error::Config("dedup_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn embedder(&self) -> HashingEmbedder {
        HashingEmbedder::new(self.embedding_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub key: String,
    pub snippets: BTreeSet<String>,
    pub embedding: Vec<f64>,
    pub provenance: BTreeSet<String>,
}

impl GraphNode {
    pub fn value(&self, budget: usize) -> String {
        render_value(&self.snippets, budget)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeRef<'a> {
    pub source: &'a str,
    pub target: &'a str,
    pub relation: &'a str,
}

type EdgeId = (String, String, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub source: String,
    pub target: String,
    pub relation: String,
    /// Retrieval key of the edge.
    pub key: String,
    pub snippets: BTreeSet<String>,
    pub embedding: Vec<f64>,
    pub provenance: BTreeSet<String>,
}

impl GraphEdge {
    fn id(&self) -> EdgeId {
        (self.source.clone(), self.target.clone(), self.relation.clone())
    }

    pub fn value(&self, budget: usize) -> String {
        render_value(&self.snippets, budget)
    }
}

/// Retrieval key of an edge: both endpoints around the relation.
pub fn edge_key(source: &str, target: &str, relation: &str) -> String {
    format!("{source} {relation} {target}")
}

fn render_value(snippets: &BTreeSet<String>, budget: usize) -> String {
    truncate_chars(&snippets.iter().cloned().collect::<Vec<_>>().join("\n"), budget)
}

fn truncate_chars(s: &str, budget: usize) -> String {
    match s.char_indices().nth(budget) {
        Some((i, _)) => s[..i].to_string(),
        None => s.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeGraph {
    pub config: GraphConfig,
    nodes: BTreeMap<String, GraphNode>,
    edges: BTreeMap<EdgeId, GraphEdge>,
}

/// On-disk layout: config plus node and edge lists in key order.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphFile {
    config: GraphConfig,
    nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
}

impl Serialize for KnowledgeGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GraphFile {
            config: self.config,
            nodes: self.nodes.values().cloned().collect(),
            edges: self.edges.values().cloned().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for KnowledgeGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = GraphFile::deserialize(d)?;
        let mut g = KnowledgeGraph::new(file.config);
        for n in file.nodes {
            g.nodes.insert(n.key.clone(), n);
        }
        for e in file.edges {
            g.edges.insert(e.id(), e);
        }
        g.check_integrity().map_err(serde::de::Error::custom)?;
        Ok(g)
    }
}

impl KnowledgeGraph {
    pub fn new(config: GraphConfig) -> Self {
        KnowledgeGraph {
            config,
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &GraphEdge> {
        self.edges.values()
    }

    pub fn node(&self, key: &str) -> Option<&GraphNode> {
        self.nodes.get(key)
    }

    pub fn edge(&self, r: EdgeRef<'_>) -> Option<&GraphEdge> {
        self.edges
            .get(&(r.source.to_string(), r.target.to_string(), r.relation.to_string()))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty()
    }

    /// Every edge endpoint names a node, and every embedding has the configured dimension.
    pub fn check_integrity(&self) -> Result<()> {
        let dim = self.config.embedding_dim;
        for (k, n) in &self.nodes {
            if *k != n.key {
                return Err(Error::Config(format!("node stored under {k:?} has key {:?}", n.key)));
            }
            if n.embedding.len() != dim {
                return Err(Error::Shape(format!(
                    "node {k:?} embedding has dim {}",
                    n.embedding.len()
                )));
            }
        }
        for e in self.edges.values() {
            for end in [&e.source, &e.target] {
                if !self.nodes.contains_key(end) {
                    return Err(Error::Config(format!("edge endpoint {end:?} is not a node")));
                }
            }
            if e.embedding.len() != dim {
                return Err(Error::Shape(format!(
                    "edge {:?} embedding has dim {}",
                    e.key,
                    e.embedding.len()
                )));
            }
        }
        Ok(())
    }

    fn absorb(&mut self, other: &KnowledgeGraph) {
        for n in other.nodes.values() {
            self.upsert_node(n.clone());
        }
        for e in other.edges.values() {
            self.upsert_edge(e.clone());
        }
    }

    fn upsert_node(&mut self, node: GraphNode) {
        match self.nodes.get_mut(&node.key) {
            Some(existing) => {
                existing.snippets.extend(node.snippets);
                existing.provenance.extend(node.provenance);
            }
            None => {
                self.nodes.insert(node.key.clone(), node);
            }
        }
    }

    fn upsert_edge(&mut self, edge: GraphEdge) {
        match self.edges.get_mut(&edge.id()) {
            Some(existing) => {
                existing.snippets.extend(edge.snippets);
                existing.provenance.extend(edge.provenance);
            }
            None => {
                self.edges.insert(edge.id(), edge);
            }
        }
    }
}

/// Gazetteer phrases as lowercase word sequences, longest first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Gazetteer {
    phrases: Vec<Vec<String>>,
}

impl Gazetteer {
    pub fn new<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut phrases: Vec<Vec<String>> = terms
            .into_iter()
            .map(|t| words(t.as_ref()))
            .filter(|w| !w.is_empty())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        // stable: longer first, then lexicographic
        phrases.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Gazetteer { phrases }
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Longest-match, non-overlapping, left-to-right phrase hits, as
    /// space-joined terms in text order.
    pub fn find(&self, text: &str) -> Vec<String> {
        let ws = words(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < ws.len() {
            match self.phrases.iter().find(|p| ws[i..].starts_with(p)) {
                Some(p) => {
                    out.push(p.join(" "));
                    i += p.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub source: String,
    pub target: String,
    /// Where the pair was observed, `cooccurs_in:<doc>:<sentence>`.
    pub observed: String,
    pub relation: String,
    pub sentence: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Extraction {
    /// Distinct entity terms in first-occurrence order.
    pub entities: Vec<String>,
    pub relations: Vec<Relation>,
    pub sentences: Vec<String>,
}

/// Splits on sentence punctuation and newlines; empty pieces are dropped.
pub fn sentences(text: &str) -> Vec<String> {
    text.split(['.', '!', '?', ';', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Rule-based extraction: gazetteer hits are entities, and distinct entities
/// sharing a sentence are related.
pub fn extract_entities_relations(doc_id: &str, text: &str, gazetteer: &Gazetteer) -> Extraction {
    let sents = sentences(text);
    let mut entities: Vec<String> = Vec::new();
    let mut relations = Vec::new();
    let mut seen_pairs = BTreeSet::new();
    for (si, s) in sents.iter().enumerate() {
        let hits: BTreeSet<String> = gazetteer.find(s).into_iter().collect();
        for h in gazetteer.find(s) {
            if !entities.contains(&h) {
                entities.push(h);
            }
        }
        let hits: Vec<&String> = hits.iter().collect();
        for (a, &src) in hits.iter().enumerate() {
            for &tgt in &hits[a + 1..] {
                if seen_pairs.insert((src.clone(), tgt.clone(), si)) {
                    relations.push(Relation {
                        source: src.clone(),
                        target: tgt.clone(),
                        observed: format!("cooccurs_in:{doc_id}:{si}"),
                        relation: RELATED_TO.to_string(),
                        sentence: si,
                    });
                }
            }
        }
    }
    Extraction {
        entities,
        relations,
        sentences: sents,
    }
}

/// Key and value for a term: the normalized term and the distinct snippets
/// that mention it, newline-joined and cut to `budget` characters.
pub fn profile(term: &str, snippets: &[String], budget: usize) -> Result<(String, String)> {
    if snippets.is_empty() {
        return Err(arg("profile needs at least one snippet"));
    }
    let key = collapse_whitespace(term);
    let mut seen = BTreeSet::new();
    let picked: Vec<&str> = snippets
        .iter()
        .filter(|s| collapse_whitespace(s).contains(&key))
        .filter(|s| seen.insert(s.as_str()))
        .map(String::as_str)
        .collect();
    Ok((key, truncate_chars(&picked.join("\n"), budget)))
}

fn mentions(snippet: &str, term: &str) -> bool {
    words(snippet)
        .windows(words(term).len().max(1))
        .any(|w| w.join(" ") == term)
}

/// Builds the subgraph of one document without deduplication.
pub fn document_subgraph(config: GraphConfig, doc_id: &str, text: &str, gazetteer: &Gazetteer) -> KnowledgeGraph {
    let embedder = config.embedder();
    let ex = extract_entities_relations(doc_id, text, gazetteer);
    let mut g = KnowledgeGraph::new(config);
    for term in &ex.entities {
        let key = collapse_whitespace(term);
        g.upsert_node(GraphNode {
            embedding: embedder.embed(&key),
            snippets: ex.sentences.iter().filter(|s| mentions(s, term)).cloned().collect(),
            provenance: BTreeSet::from([doc_id.to_string()]),
            key,
        });
    }
    for r in &ex.relations {
        let key = edge_key(&r.source, &r.target, &r.relation);
        g.upsert_edge(GraphEdge {
            source: r.source.clone(),
            target: r.target.clone(),
            relation: r.relation.clone(),
            embedding: embedder.embed(&key),
            key,
            snippets: BTreeSet::from([ex.sentences[r.sentence].clone()]),
            provenance: BTreeSet::from([doc_id.to_string()]),
        });
    }
    g
}

/// Greedy merge of near-duplicate nodes: the first key-ordered pair with
/// cosine >= `threshold` is folded into its smaller key, repeatedly, then
/// edges are re-pointed and coinciding edges merged.
pub fn dedupe(graph: &mut KnowledgeGraph, threshold: f64) {
    let mut alias: BTreeMap<String, String> = BTreeMap::new();
    while let Some((keep, drop)) = first_similar_pair(graph, threshold) {
        let gone = graph.nodes.remove(&drop).expect("pair came from the node map");
        let survivor = graph.nodes.get_mut(&keep).expect("pair came from the node map");
        survivor.snippets.extend(gone.snippets);
        survivor.provenance.extend(gone.provenance);
        for target in alias.values_mut().filter(|t| **t == drop) {
            *target = keep.clone();
        }
        alias.insert(drop, keep);
    }
    if alias.is_empty() {
        return;
    }
    let embedder = graph.config.embedder();
    let edges = std::mem::take(&mut graph.edges);
    for (_, mut e) in edges {
        let resolve = |k: &String| alias.get(k).cloned().unwrap_or_else(|| k.clone());
        let (a, b) = (resolve(&e.source), resolve(&e.target));
        if a == b {
            continue;
        }
        let (source, target) = if a < b { (a, b) } else { (b, a) };
        if (source.as_str(), target.as_str()) != (e.source.as_str(), e.target.as_str()) {
            e.key = edge_key(&source, &target, &e.relation);
            e.embedding = embedder.embed(&e.key);
            e.source = source;
            e.target = target;
        }
        graph.upsert_edge(e);
    }
}

fn first_similar_pair(graph: &KnowledgeGraph, threshold: f64) -> Option<(String, String)> {
    let nodes: Vec<&GraphNode> = graph.nodes.values().collect();
    for (i, a) in nodes.iter().enumerate() {
        for b in &nodes[i + 1..] {
            if cosine(&a.embedding, &b.embedding) >= threshold {
                return Some((a.key.clone(), b.key.clone()));
            }
        }
    }
    None
}

/// Set union of nodes (by key) and edges (by endpoints and relation), then dedupe.
pub fn merge(graph: &mut KnowledgeGraph, subgraph: &KnowledgeGraph) -> Result<()> {
    if graph.config != subgraph.config {
        return Err(Error::Config(format!(
            "graph configs differ: {:?} vs {:?}",
            graph.config, subgraph.config
        )));
    }
    graph.absorb(subgraph);
    dedupe(graph, graph.config.dedup_threshold);
    Ok(())
}

/// Indexes a whole corpus at once: every document subgraph is unioned first
/// and deduplicated in a single pass.
pub fn index_batch<'a, I>(config: GraphConfig, docs: I, gazetteer: &Gazetteer) -> KnowledgeGraph
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut g = KnowledgeGraph::new(config);
    for (doc_id, text) in docs {
        g.absorb(&document_subgraph(config, doc_id, text, gazetteer));
    }
    dedupe(&mut g, config.dedup_threshold);
    g
}

/// Extract, profile, insert and dedupe one document.
pub fn index_document(graph: &mut KnowledgeGraph, doc_id: &str, text: &str, gazetteer: &Gazetteer) -> Result<()> {
    let sub = document_subgraph(graph.config, doc_id, text, gazetteer);
    merge(graph, &sub)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueryKeywords {
    pub local: Vec<String>,
    pub global: Vec<String>,
}

/// Local terms are gazetteer hits in the query; global cues are their topic labels.
pub fn extract_keywords(q_raw: &str, gazetteer: &Gazetteer, topic_map: &BTreeMap<String, String>) -> QueryKeywords {
    let topics: BTreeMap<String, String> = topic_map
        .iter()
        .map(|(k, v)| (collapse_whitespace(k), collapse_whitespace(v)))
        .collect();
    let mut kw = QueryKeywords::default();
    for term in gazetteer.find(q_raw) {
        if let Some(topic) = topics.get(&term) {
            if !kw.global.contains(topic) {
                kw.global.push(topic.clone());
            }
        }
        if !kw.local.contains(&term) {
            kw.local.push(term);
        }
    }
    kw
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeHit {
    pub key: String,
    pub score: f64,
    pub value: String,
    pub provenance: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeHit {
    pub source: String,
    pub target: String,
    pub relation: String,
    pub key: String,
    pub score: f64,
    pub value: String,
    pub provenance: BTreeSet<String>,
}

/// Max cosine of each item against any query term; non-positive scores are
/// dropped, the rest ranked descending with ties in key order.
fn rank<'a, T, I>(terms: &[String], items: I, embedder: &dyn Embedder, top_k: usize) -> Vec<(f64, &'a T)>
where
    I: Iterator<Item = (&'a [f64], &'a T)>,
{
    if terms.is_empty() || top_k == 0 {
        return Vec::new();
    }
    let queries: Vec<Vec<f64>> = terms.iter().map(|t| embedder.embed(&collapse_whitespace(t))).collect();
    let mut scored: Vec<(f64, &T)> = items
        .map(|(emb, item)| {
            let s = queries.iter().map(|q| cosine(q, emb)).fold(f64::NEG_INFINITY, f64::max);
            (s, item)
        })
        .filter(|(s, _)| *s > 0.0)
        .collect();
    // items arrive in key order; a stable sort keeps it among ties
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(top_k);
    scored
}

/// Low-level retrieval: local terms against node key embeddings.
pub fn retrieve_low(local: &[String], graph: &KnowledgeGraph, top_k: usize) -> Vec<NodeHit> {
    let embedder = graph.config.embedder();
    let items = graph.nodes.values().map(|n| (n.embedding.as_slice(), n));
    rank(local, items, &embedder, top_k)
        .into_iter()
        .map(|(score, n)| NodeHit {
            key: n.key.clone(),
            score,
            value: n.value(graph.config.value_budget),
            provenance: n.provenance.clone(),
        })
        .collect()
}

/// High-level retrieval: topic cues against edge key embeddings.
pub fn retrieve_high(global: &[String], graph: &KnowledgeGraph, top_k: usize) -> Vec<EdgeHit> {
    let embedder = graph.config.embedder();
    let items = graph.edges.values().map(|e| (e.embedding.as_slice(), e));
    rank(global, items, &embedder, top_k)
        .into_iter()
        .map(|(score, e)| EdgeHit {
            source: e.source.clone(),
            target: e.target.clone(),
            relation: e.relation.clone(),
            key: e.key.clone(),
            score,
            value: e.value(graph.config.value_budget),
            provenance: e.provenance.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalContext {
    pub node_hits: Vec<NodeHit>,
    pub edge_hits: Vec<EdgeHit>,
    pub text: String,
    pub provenance: BTreeSet<String>,
}

pub fn render_node_hit(h: &NodeHit) -> String {
    format!("{}: {}", h.key, h.value)
}

pub fn render_edge_hit(h: &EdgeHit) -> String {
    format!("{} -[{}]- {}: {}", h.source, h.relation, h.target, h.value)
}

/// Alternates node and edge renderings in score order, newline-separated,
/// stopping at the first piece that would exceed `budget` characters.
pub fn assemble_context(node_hits: Vec<NodeHit>, edge_hits: Vec<EdgeHit>, budget: usize) -> RetrievalContext {
    let mut pieces: Vec<(String, &BTreeSet<String>)> = Vec::new();
    for i in 0..node_hits.len().max(edge_hits.len()) {
        if let Some(n) = node_hits.get(i) {
            pieces.push((render_node_hit(n), &n.provenance));
        }
        if let Some(e) = edge_hits.get(i) {
            pieces.push((render_edge_hit(e), &e.provenance));
        }
    }
    let mut text = String::new();
    let mut used = 0;
    let mut provenance = BTreeSet::new();
    for (piece, prov) in pieces {
        let cost = piece.chars().count() + usize::from(!text.is_empty());
        if used + cost > budget {
            break;
        }
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&piece);
        used += cost;
        provenance.extend(prov.iter().cloned());
    }
    RetrievalContext {
        node_hits,
        edge_hits,
        text,
        provenance,
    }
}

/// Topic-map entries for the query's local terms whose canonical term
/// appears in the retrieval context.
pub fn grounded_replacements(
    keywords: &QueryKeywords,
    topic_map: &BTreeMap<String, String>,
    context: &RetrievalContext,
) -> BTreeMap<String, String> {
    let grounded: BTreeSet<String> = context
        .node_hits
        .iter()
        .map(|h| h.key.clone())
        .chain(
            context
                .edge_hits
                .iter()
                .flat_map(|h| [h.source.clone(), h.target.clone()]),
        )
        .collect();
    let ctx_text = collapse_whitespace(&context.text);
    topic_map
        .iter()
        .map(|(k, v)| (collapse_whitespace(k), collapse_whitespace(v)))
        .filter(|(k, v)| keywords.local.contains(k) && (grounded.contains(v) || ctx_text.contains(v.as_str())))
        .collect()
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'-' || b == b'_'
}

/// Single-pass, longest-match, left-to-right replacement of whole-word
/// occurrences (ASCII case-insensitive). Replaced text is never rescanned.
pub fn normalize_query(q_raw: &str, replacements: &BTreeMap<String, String>) -> String {
    let mut keys: Vec<(&str, &str)> = replacements
        .iter()
        .filter(|(k, _)| !k.is_empty())
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .collect();
    keys.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(b.0)));

    let bytes = q_raw.as_bytes();
    let mut out = String::with_capacity(q_raw.len());
    let mut i = 0;
    let mut copied = 0;
    while i < bytes.len() {
        let at_start = i == 0 || !is_word_byte(bytes[i - 1]);
        let hit = at_start
            .then(|| {
                keys.iter().find(|(k, _)| {
                    let end = i + k.len();
                    end <= bytes.len()
                        && bytes[i..end].eq_ignore_ascii_case(k.as_bytes())
                        && (end == bytes.len() || !is_word_byte(bytes[end]))
                })
            })
            .flatten();
        match hit {
            Some((k, v)) => {
                out.push_str(&q_raw[copied..i]);
                out.push_str(v);
                i += k.len();
                copied = i;
            }
            None => i += 1,
        }
    }
    out.push_str(&q_raw[copied..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaz() -> Gazetteer {
        Gazetteer::new([
            "heavy fog",
            "multi-vehicle pileup",
            "traffic accident",
            "accident",
            "ramp",
        ])
    }

    #[test]
    fn extraction_examples() {
        let ex = extract_entities_relations("d1", "heavy fog caused a multi-vehicle pileup", &gaz());
        assert_eq!(ex.entities, vec!["heavy fog", "multi-vehicle pileup"]);
        assert_eq!(ex.relations.len(), 1);
        assert_eq!(ex.relations[0].relation, RELATED_TO);
        assert_eq!(ex.relations[0].observed, "cooccurs_in:d1:0");

        assert_eq!(
            extract_entities_relations("d", "nothing to see", &gaz()),
            Extraction {
                sentences: vec!["nothing to see".into()],
                ..Default::default()
            }
        );

        let ex = extract_entities_relations("d", "a traffic accident happened", &gaz());
        assert_eq!(ex.entities, vec!["traffic accident"]);
    }

    #[test]
    fn relations_stay_within_sentences() {
        let ex = extract_entities_relations("d", "heavy fog today. a ramp closed", &gaz());
        assert_eq!(ex.entities.len(), 2);
        assert!(ex.relations.is_empty());
    }

    #[test]
    fn profile_examples() {
        let (k, l) = profile(
            "  Traffic   Congestion ",
            &["traffic congestion on the ramp".into()],
            100,
        )
        .unwrap();
        assert_eq!(k, "traffic congestion");
        assert_eq!(l, "traffic congestion on the ramp");
        let dup = vec!["fog here".to_string(), "fog here".to_string()];
        assert_eq!(profile("fog", &dup, 100).unwrap().1, "fog here");
        assert!(profile("fog", &[], 100).is_err());
        assert_eq!(profile("fog", &["fog everywhere".into()], 3).unwrap().1, "fog");
    }

    fn two_node_graph(a: &str, b: &str) -> KnowledgeGraph {
        let cfg = GraphConfig::default();
        let e = cfg.embedder();
        let mut g = KnowledgeGraph::new(cfg);
        for (k, doc) in [(a, "d1"), (b, "d2")] {
            g.upsert_node(GraphNode {
                key: k.into(),
                snippets: BTreeSet::from([format!("about {k}")]),
                embedding: e.embed(k),
                provenance: BTreeSet::from([doc.to_string()]),
            });
        }
        g
    }

    #[test]
    fn dedupe_merges_identical_embeddings() {
        // same token multiset, different key text
        let mut g = two_node_graph("heavy fog", "fog heavy");
        let ek = edge_key("fog heavy", "ramp", RELATED_TO);
        g.upsert_node(GraphNode {
            key: "ramp".into(),
            snippets: BTreeSet::new(),
            embedding: g.config.embedder().embed("ramp"),
            provenance: BTreeSet::new(),
        });
        g.upsert_edge(GraphEdge {
            source: "fog heavy".into(),
            target: "ramp".into(),
            relation: RELATED_TO.into(),
            embedding: g.config.embedder().embed(&ek),
            key: ek,
            snippets: BTreeSet::new(),
            provenance: BTreeSet::from(["d2".to_string()]),
        });
        dedupe(&mut g, 0.95);
        assert_eq!(g.node_count(), 2);
        let n = g.node("fog heavy").unwrap();
        assert_eq!(n.provenance.len(), 2);
        let e = g.edges().next().unwrap();
        assert_eq!((e.source.as_str(), e.target.as_str()), ("fog heavy", "ramp"));
        g.check_integrity().unwrap();

        let once = g.clone();
        dedupe(&mut g, 0.95);
        assert_eq!(g, once);
    }

    #[test]
    fn dedupe_repoints_edges_to_survivor() {
        let mut g = two_node_graph("fog heavy", "heavy fog");
        let e = g.config.embedder();
        g.upsert_node(GraphNode {
            key: "ramp".into(),
            snippets: BTreeSet::new(),
            embedding: e.embed("ramp"),
            provenance: BTreeSet::new(),
        });
        let ek = edge_key("heavy fog", "ramp", RELATED_TO);
        g.upsert_edge(GraphEdge {
            source: "heavy fog".into(),
            target: "ramp".into(),
            relation: RELATED_TO.into(),
            embedding: e.embed(&ek),
            key: ek,
            snippets: BTreeSet::new(),
            provenance: BTreeSet::new(),
        });
        dedupe(&mut g, 0.95);
        assert!(g.node("heavy fog").is_none());
        let edge = g.edges().next().unwrap();
        assert_eq!(edge.source, "fog heavy");
        assert_eq!(edge.key, "fog heavy related_to ramp");
        assert_eq!(edge.embedding, e.embed("fog heavy related_to ramp"));
    }

    #[test]
    fn dissimilar_nodes_untouched() {
        let mut g = two_node_graph("heavy fog", "ramp");
        let before = g.clone();
        dedupe(&mut g, 0.95);
        assert_eq!(g, before);
    }

    #[test]
    fn index_examples() {
        let mut g = KnowledgeGraph::new(GraphConfig::default());
        index_document(&mut g, "d1", "", &gaz()).unwrap();
        assert!(g.is_empty());

        let text = "heavy fog near the ramp caused a multi-vehicle pileup. The ramp closed.";
        index_document(&mut g, "d1", text, &gaz()).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_count(), 3);
        let ramp = g.node("ramp").unwrap();
        assert_eq!(ramp.snippets.len(), 2);
        let once = g.clone();
        index_document(&mut g, "d1", text, &gaz()).unwrap();
        assert_eq!(g, once);
        g.check_integrity().unwrap();
    }

    #[test]
    fn merge_identities_and_config_check() {
        let mut g = KnowledgeGraph::new(GraphConfig::default());
        index_document(&mut g, "d1", "heavy fog at the ramp", &gaz()).unwrap();
        let before = g.clone();
        merge(&mut g, &KnowledgeGraph::new(GraphConfig::default())).unwrap();
        assert_eq!(g, before);
        let copy = g.clone();
        merge(&mut g, &copy).unwrap();
        assert_eq!(g, before);
        let other = KnowledgeGraph::new(GraphConfig {
            embedding_dim: 64,
            ..GraphConfig::default()
        });
        assert!(matches!(merge(&mut g, &other), Err(Error::Config(_))));
    }

    #[test]
    fn keyword_example_from_query() {
        let gaz = Gazetteer::new(["long queue", "red-green light", "traffic congestion", "signal control"]);
        let topics = BTreeMap::from([
            ("long queue".to_string(), "traffic congestion".to_string()),
            ("red-green light".to_string(), "signal control".to_string()),
        ]);
        let kw = extract_keywords("long queue at the red-green light", &gaz, &topics);
        assert_eq!(kw.local, vec!["long queue", "red-green light"]);
        assert_eq!(kw.global, vec!["traffic congestion", "signal control"]);

        assert_eq!(extract_keywords("clear road", &gaz, &topics), QueryKeywords::default());
        let kw = extract_keywords("long queue, long queue again", &gaz, &topics);
        assert_eq!(kw.local, vec!["long queue"]);
        assert_eq!(kw.global, vec!["traffic congestion"]);
    }

    #[test]
    fn low_retrieval_ranks_exact_key_first() {
        let g = two_node_graph("heavy fog", "ramp");
        let hits = retrieve_low(&["heavy fog".into()], &g, 5);
        assert_eq!(hits[0].key, "heavy fog");
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        assert!(hits.iter().skip(1).all(|h| h.score < hits[0].score));
        assert!(retrieve_low(&[], &g, 5).is_empty());
        assert!(retrieve_low(&["fog".into()], &KnowledgeGraph::default(), 5).is_empty());
    }

    #[test]
    fn high_retrieval_mirrors_low() {
        let mut g = KnowledgeGraph::new(GraphConfig::default());
        index_document(
            &mut g,
            "d",
            "heavy fog at the ramp. a traffic accident on the ramp",
            &gaz(),
        )
        .unwrap();
        let key = edge_key("heavy fog", "ramp", RELATED_TO);
        let hits = retrieve_high(std::slice::from_ref(&key), &g, 5);
        assert_eq!(hits[0].key, key);
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        assert!(hits[1].score < hits[0].score);
        assert!(retrieve_high(&[], &g, 5).is_empty());
    }

    #[test]
    fn context_assembly() {
        let empty = assemble_context(vec![], vec![], 100);
        assert!(empty.text.is_empty());

        let hit = NodeHit {
            key: "heavy fog".into(),
            score: 1.0,
            value: "fog on bridge".into(),
            provenance: BTreeSet::from(["d1".to_string()]),
        };
        let c = assemble_context(vec![hit.clone()], vec![], 1000);
        assert_eq!(c.text, "heavy fog: fog on bridge");
        assert_eq!(c.provenance, BTreeSet::from(["d1".to_string()]));

        let zero = assemble_context(vec![hit], vec![], 0);
        assert!(zero.text.is_empty());
        assert_eq!(zero.node_hits.len(), 1);
    }

    #[test]
    fn query_normalization() {
        let m = BTreeMap::from([("long queue".to_string(), "traffic congestion".to_string())]);
        assert_eq!(normalize_query("long queue", &m), "traffic congestion");
        assert_eq!(
            normalize_query("A Long Queue, again.", &m),
            "A traffic congestion, again."
        );
        assert_eq!(normalize_query("oblong queue", &m), "oblong queue");
        assert_eq!(normalize_query("anything at all", &BTreeMap::new()), "anything at all");

        let overlap = BTreeMap::from([
            ("queue".to_string(), "line".to_string()),
            ("long queue".to_string(), "queue backlog".to_string()),
        ]);
        // longest match wins and the produced "queue" is not replaced again
        assert_eq!(normalize_query("long queue here", &overlap), "queue backlog here");
    }

    #[test]
    fn grounding_filters_replacements() {
        let topics = BTreeMap::from([("long queue".to_string(), "traffic congestion".to_string())]);
        let kw = QueryKeywords {
            local: vec!["long queue".into()],
            global: vec!["traffic congestion".into()],
        };
        let hit = NodeHit {
            key: "traffic congestion".into(),
            score: 0.5,
            value: String::new(),
            provenance: BTreeSet::new(),
        };
        let ctx = assemble_context(vec![hit], vec![], 100);
        assert_eq!(grounded_replacements(&kw, &topics, &ctx).len(), 1);
        assert!(grounded_replacements(&kw, &topics, &RetrievalContext::default()).is_empty());
    }

    #[test]
    fn graph_json_round_trip() {
        let mut g = KnowledgeGraph::new(GraphConfig::default());
        index_document(&mut g, "d1", "heavy fog at the ramp. a traffic accident", &gaz()).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        let back: KnowledgeGraph = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    #[test]
    fn dangling_edge_rejected_on_load() {
        let json = r#"{"config":{"embedding_dim":2,"dedup_threshold":0.95,"value_budget":10},
            "nodes":[],"edges":[{"source":"a","target":"b","relation":"related_to","key":"a related_to b",
            "snippets":[],"embedding":[1.0,0.0],"provenance":[]}]}"#;
        assert!(serde_json::from_str::<KnowledgeGraph>(json).is_err());
    }
}
