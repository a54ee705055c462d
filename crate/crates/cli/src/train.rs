use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use serde_json::Value;

use incident_align::grpo::{evaluate, train_from, GrpoConfig};
use incident_align::policy::{Checkpoint, OptimizerState, TokenId, ToyPolicy};
use incident_align::synthetic::TagEmissionTask;

use crate::io::{self, CliError, CliResult};
use crate::score::TextRecord;
use crate::{require_out, GlobalArgs, Outcome};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Hyperparameter preset, "paper" or "desk"; the config's "grpo" section overrides it.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Per-epoch metrics as JSON Lines. Appended to when resuming.
    #[arg(long)]
    pub metrics: PathBuf,
    /// JSON Lines of {"text": ...} prompts in the task vocabulary; defaults to the built-in prompts.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop before this epoch; the schedule still spans the configured epochs.
    #[arg(long)]
    pub until: Option<usize>,
    /// N-gram order of the policy.
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    /// Samples per query for the before/after evaluation; 0 skips it.
    #[arg(long, default_value_t = 4)]
    pub eval_samples: usize,
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    preset: &'a str,
    grpo: GrpoConfig,
    task: &'static str,
    vocab_size: usize,
    order: usize,
    init: &'static str,
    queries: Vec<String>,
    resume: Option<&'a Path>,
    until: Option<usize>,
    eval_samples: usize,
}

#[derive(Serialize)]
struct Outputs<'a> {
    checkpoint: &'a Path,
    metrics: &'a Path,
    start_epoch: usize,
    end_epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_reward_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_reward_after: Option<f64>,
}

const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

pub fn run(g: &GlobalArgs, config: Option<&Value>, a: TrainArgs) -> CliResult<Outcome> {
    let out = require_out(g, "train-grpo")?;
    let task = TagEmissionTask::new();
    let preset = GrpoConfig::preset(&a.preset)?;
    let base = GrpoConfig {
        sampling: task.sampling,
        ..preset
    };
    let cfg = io::overlay(base, io::section(config, "grpo"), "grpo")?;
    cfg.validate()?;
    if a.order == 0 {
        return Err(CliError::Usage("--order must be at least 1".into()));
    }

    let mut skipped = Vec::new();
    let queries: Vec<Vec<TokenId>> = match &a.queries {
        None => task.queries.clone(),
        Some(path) => {
            let mut lines = io::read_jsonl::<TextRecord>(path, g.strict)?;
            let mut qs = Vec::new();
            for (n, r) in std::mem::take(&mut lines.records) {
                match task.words.encode(&r.text) {
                    Ok(q) => qs.push(q),
                    Err(e) => lines.reject(path, n, e.to_string(), g.strict)?,
                }
            }
            skipped = lines.skipped;
            if qs.is_empty() {
                return Err(CliError::io(path, "no usable queries"));
            }
            qs
        }
    };

    let initial = ToyPolicy::uniform(task.vocab_size(), a.order)?;
    let (policy, optimizer) = match &a.resume {
        None => (initial.clone(), OptimizerState::new(&initial)),
        Some(path) => {
            let ck: Checkpoint = io::read_json(path)?;
            let policy = ck.policy().map_err(|e| CliError::io(path, e))?;
            if (policy.vocab_size, policy.order) != (initial.vocab_size, initial.order) {
                return Err(CliError::io(path, "checkpoint shape does not match the task"));
            }
            let opt = ck
                .optimizer_state
                .ok_or_else(|| CliError::io(path, "checkpoint has no optimizer state"))?;
            (policy, opt)
        }
    };
    let end = a.until.unwrap_or(cfg.epochs).min(cfg.epochs);
    let start = usize::try_from(optimizer.step).unwrap_or(usize::MAX).min(end);

    let reward = |_: &[TokenId], resp: &[TokenId]| task.struct_reward(resp);
    let eval = |p: &ToyPolicy| -> CliResult<Option<f64>> {
        if a.eval_samples == 0 {
            return Ok(None);
        }
        Ok(Some(evaluate(
            p,
            &queries,
            &cfg.sampling,
            a.eval_samples,
            &reward,
            g.seed ^ EVAL_SEED_SALT,
        )?))
    };
    let before = eval(&policy)?;
    let outcome = train_from(&cfg, policy, optimizer, start..end, &initial, &queries, &reward, g.seed)?;
    let after = eval(&outcome.policy)?;

    io::write_json(&out, &Checkpoint::new(&outcome.policy, Some(outcome.optimizer.clone())))?;
    let rows = outcome
        .metrics
        .epochs
        .iter()
        .map(|m| if g.timing { m.clone() } else { m.without_timing() });
    let text = io::jsonl(rows);
    if a.resume.is_some() {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&a.metrics)
            .map_err(|e| CliError::io(&a.metrics, e))?;
        f.write_all(text.as_bytes()).map_err(|e| CliError::io(&a.metrics, e))?;
    } else {
        io::write_text(&a.metrics, &text)?;
    }

    let resolved = ResolvedConfig {
        preset: &a.preset,
        grpo: cfg,
        task: "tag-emission",
        vocab_size: task.vocab_size(),
        order: a.order,
        init: "uniform",
        queries: queries
            .iter()
            .map(|q| task.words.decode(q).unwrap_or_default())
            .collect(),
        resume: a.resume.as_deref(),
        until: a.until,
        eval_samples: a.eval_samples,
    };
    let outputs = Outputs {
        checkpoint: &out,
        metrics: &a.metrics,
        start_epoch: start,
        end_epoch: end,
        mean_reward_before: before,
        mean_reward_after: after,
    };
    Ok(Outcome::new("train-grpo", g, resolved, outputs, skipped))
}
