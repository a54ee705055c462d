use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde::Serialize;
use serde_json::Value;

use incident_align::graphrag::{
    assemble_context, extract_keywords, grounded_replacements, index_document, merge, normalize_query, retrieve_high,
    retrieve_low, EdgeHit, Gazetteer, GraphConfig, KnowledgeGraph, NodeHit, QueryKeywords,
};
use incident_align::synthetic::{kg_gazetteer, kg_topic_map, CorpusDoc};

use crate::io::{self, CliError, CliResult};
use crate::score::TextRecord;
use crate::{require_out, GlobalArgs, Outcome};

#[derive(Subcommand, Debug)]
pub enum KgCommand {
    /// Index a corpus of {"doc_id", "text"} lines, optionally into an existing graph.
    Index(IndexArgs),
    /// Merge a second graph into the first.
    Merge(MergeArgs),
    /// Dual-level retrieval for one or more queries.
    Query(QueryArgs),
}

#[derive(Args, Debug)]
pub struct LexiconArgs {
    /// JSON array of domain terms; defaults to the built-in traffic gazetteer.
    #[arg(long)]
    pub gazetteer: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Existing graph to extend.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[command(flatten)]
    pub lexicon: LexiconArgs,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long = "with")]
    pub other: PathBuf,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Query text; may repeat.
    #[arg(long)]
    pub query: Vec<String>,
    /// JSON Lines of {"text": ...} queries, answered after any --query.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[command(flatten)]
    pub lexicon: LexiconArgs,
    /// JSON object mapping colloquial terms to topic labels; defaults to the built-in map.
    #[arg(long)]
    pub topic_map: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Character budget of the assembled context.
    #[arg(long, default_value_t = 2000)]
    pub budget: usize,
}

fn gazetteer_terms(lex: &LexiconArgs) -> CliResult<Vec<String>> {
    match &lex.gazetteer {
        Some(p) => io::read_json(p),
        None => Ok(kg_gazetteer()),
    }
}

fn load_graph(path: &Path) -> CliResult<KnowledgeGraph> {
    io::read_json(path)
}

#[derive(Serialize)]
struct GraphSummary<'a> {
    out: &'a Path,
    nodes: usize,
    edges: usize,
}

impl<'a> GraphSummary<'a> {
    fn of(out: &'a Path, g: &KnowledgeGraph) -> Self {
        GraphSummary {
            out,
            nodes: g.node_count(),
            edges: g.edge_count(),
        }
    }
}

#[derive(Serialize)]
struct QueryResult {
    query: String,
    keywords: QueryKeywords,
    node_hits: Vec<NodeHit>,
    edge_hits: Vec<EdgeHit>,
    context: String,
    provenance: BTreeSet<String>,
    normalized_query: String,
}

pub fn run(g: &GlobalArgs, config: Option<&Value>, cmd: KgCommand) -> CliResult<Outcome> {
    let graph_cfg = io::overlay(GraphConfig::default(), io::section(config, "graph"), "graph")?;
    graph_cfg.validate()?;
    match cmd {
        KgCommand::Index(a) => index(g, graph_cfg, io::section(config, "graph").is_some(), a),
        KgCommand::Merge(a) => merge_cmd(g, a),
        KgCommand::Query(a) => query(g, a),
    }
}

#[derive(Serialize)]
struct IndexConfig<'a> {
    graph: GraphConfig,
    corpus: &'a Path,
    base_graph: Option<&'a Path>,
    gazetteer: Vec<String>,
    strict: bool,
}

/// An existing graph keeps its stored settings unless the config names different ones.
fn index(g: &GlobalArgs, cfg: GraphConfig, explicit_cfg: bool, a: IndexArgs) -> CliResult<Outcome> {
    let out = require_out(g, "kg index")?;
    let terms = gazetteer_terms(&a.lexicon)?;
    let gaz = Gazetteer::new(&terms);
    let mut graph = match &a.graph {
        Some(p) => {
            let loaded = load_graph(p)?;
            if explicit_cfg && loaded.config != cfg {
                return Err(CliError::Usage(format!(
                    "graph config differs from the settings stored in {}",
                    p.display()
                )));
            }
            loaded
        }
        None => KnowledgeGraph::new(cfg),
    };
    let docs = io::read_jsonl::<CorpusDoc>(&a.corpus, g.strict)?;
    for (_, d) in &docs.records {
        index_document(&mut graph, &d.doc_id, &d.text, &gaz)?;
    }
    io::write_json(&out, &graph)?;
    let resolved = IndexConfig {
        graph: graph.config,
        corpus: &a.corpus,
        base_graph: a.graph.as_deref(),
        gazetteer: terms,
        strict: g.strict,
    };
    Ok(Outcome::new(
        "kg index",
        g,
        resolved,
        GraphSummary::of(&out, &graph),
        docs.skipped,
    ))
}

#[derive(Serialize)]
struct MergeConfig<'a> {
    graph: &'a Path,
    with: &'a Path,
}

fn merge_cmd(g: &GlobalArgs, a: MergeArgs) -> CliResult<Outcome> {
    let out = require_out(g, "kg merge")?;
    let mut graph = load_graph(&a.graph)?;
    let other = load_graph(&a.other)?;
    merge(&mut graph, &other).map_err(|e| CliError::Usage(format!("cannot merge {}: {e}", a.other.display())))?;
    io::write_json(&out, &graph)?;
    let resolved = MergeConfig {
        graph: &a.graph,
        with: &a.other,
    };
    Ok(Outcome::new(
        "kg merge",
        g,
        resolved,
        GraphSummary::of(&out, &graph),
        Vec::new(),
    ))
}

#[derive(Serialize)]
struct QueryConfig<'a> {
    graph_file: &'a Path,
    graph: GraphConfig,
    top_k: usize,
    budget: usize,
    gazetteer: Vec<String>,
    topic_map: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct QueryOutputs<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<&'a Path>,
    results: &'a [QueryResult],
}

fn query(g: &GlobalArgs, a: QueryArgs) -> CliResult<Outcome> {
    let graph = load_graph(&a.graph)?;
    let terms = gazetteer_terms(&a.lexicon)?;
    let gaz = Gazetteer::new(&terms);
    let topics: BTreeMap<String, String> = match &a.topic_map {
        Some(p) => io::read_json(p)?,
        None => kg_topic_map(),
    };
    let mut texts = a.query.clone();
    let mut skipped = Vec::new();
    if let Some(p) = &a.queries {
        let lines = io::read_jsonl::<TextRecord>(p, g.strict)?;
        texts.extend(lines.records.into_iter().map(|(_, r)| r.text));
        skipped = lines.skipped;
    }
    if texts.is_empty() {
        return Err(CliError::Usage("kg query needs --query or --queries".into()));
    }

    let results: Vec<QueryResult> = texts
        .into_iter()
        .map(|q| {
            let keywords = extract_keywords(&q, &gaz, &topics);
            let nodes = retrieve_low(&keywords.local, &graph, a.top_k);
            let edges = retrieve_high(&keywords.global, &graph, a.top_k);
            let ctx = assemble_context(nodes, edges, a.budget);
            let replacements = grounded_replacements(&keywords, &topics, &ctx);
            QueryResult {
                normalized_query: normalize_query(&q, &replacements),
                query: q,
                keywords,
                context: ctx.text,
                provenance: ctx.provenance,
                node_hits: ctx.node_hits,
                edge_hits: ctx.edge_hits,
            }
        })
        .collect();
    if let Some(out) = &g.out {
        io::write_text(out, &io::jsonl(&results))?;
    }
    let resolved = QueryConfig {
        graph_file: &a.graph,
        graph: graph.config,
        top_k: a.top_k,
        budget: a.budget,
        gazetteer: terms,
        topic_map: topics,
    };
    let outputs = QueryOutputs {
        out: g.out.as_deref(),
        results: &results,
    };
    Ok(Outcome::new("kg query", g, resolved, outputs, skipped))
}
