use std::path::Path;

use clap::Args;
use serde::Serialize;

use incident_align::synthetic::{kg_corpus_docs, tag_emission_records, vocab_coverage_docs, SyntheticTask};

use crate::io::{self, CliError, CliResult};
use crate::{require_out, GlobalArgs, Outcome};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// tag-emission, vocab-coverage or kg-corpus.
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    task: &'a str,
    count: usize,
}

#[derive(Serialize)]
struct Outputs<'a> {
    out: &'a Path,
    records: usize,
}

pub fn run(g: &GlobalArgs, a: SynthArgs) -> CliResult<Outcome> {
    let task: SyntheticTask = a
        .task
        .parse()
        .map_err(|e: incident_align::Error| CliError::Usage(e.to_string()))?;
    let out = require_out(g, "gen-synthetic")?;
    let (text, records) = match task {
        SyntheticTask::TagEmission => {
            let r = tag_emission_records(g.seed, a.count);
            (io::jsonl(&r), r.len())
        }
        SyntheticTask::VocabCoverage => {
            let r = vocab_coverage_docs(g.seed, a.count);
            (io::jsonl(&r), r.len())
        }
        SyntheticTask::KgCorpus => {
            let r = kg_corpus_docs(g.seed, a.count);
            (io::jsonl(&r), r.len())
        }
    };
    io::write_text(&out, &text)?;
    let resolved = ResolvedConfig {
        task: &a.task,
        count: a.count,
    };
    Ok(Outcome::new(
        "gen-synthetic",
        g,
        resolved,
        Outputs { out: &out, records },
        Vec::new(),
    ))
}
