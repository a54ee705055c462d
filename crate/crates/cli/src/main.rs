//! `incident-align` batch driver.
//!
//! Every command prints a JSON report (command, resolved config, seed,
//! outputs) to stdout and writes its artifacts to the paths given.

mod fusion_check;
mod io;
mod kg;
mod score;
mod synth;
mod train;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use io::{CliError, CliResult, LineError};

/// Config sections recognized in a `--config` file.
const CONFIG_SECTIONS: [&str; 4] = ["reward", "grpo", "graph", "fusion"];

#[derive(Parser, Debug)]
#[command(
    name = "incident-align",
    version,
    about = "Reward scoring, GRPO training, graph retrieval and fusion checks"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// JSON config with optional "reward", "grpo", "graph" and "fusion" sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Primary output artifact.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Abort on the first malformed input line instead of skipping it.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Include wall-clock timings; output is then no longer byte-reproducible.
    #[arg(long, global = true)]
    pub timing: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score chain-of-thought texts, one reward breakdown per input line.
    ScoreCot(score::ScoreArgs),
    /// Train a toy policy with GRPO on the tag-emission task.
    TrainGrpo(train::TrainArgs),
    /// Build, merge and query the knowledge graph.
    #[command(subcommand)]
    Kg(kg::KgCommand),
    /// Compare fusion kernels against reference evaluators and finite differences.
    FusionCheck(fusion_check::FusionArgs),
    /// Write a seeded synthetic corpus.
    GenSynthetic(synth::SynthArgs),
}

#[derive(Serialize)]
pub struct Report<C: Serialize, O: Serialize> {
    pub command: &'static str,
    pub seed: u64,
    pub config: C,
    pub outputs: O,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<LineError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

/// What a command hands back: the report body and whether its checks passed.
pub struct Outcome {
    pub report: Value,
    pub failure: Option<String>,
}

impl Outcome {
    pub fn new<C: Serialize, O: Serialize>(
        command: &'static str,
        g: &GlobalArgs,
        config: C,
        outputs: O,
        skipped: Vec<LineError>,
    ) -> Self {
        let failure = (!skipped.is_empty()).then(|| format!("{} malformed input line(s) skipped", skipped.len()));
        let report = Report {
            command,
            seed: g.seed,
            config,
            outputs,
            skipped,
            wall_clock_ms: None,
        };
        Outcome {
            report: serde_json::to_value(report).expect("reports serialize"),
            failure,
        }
    }

    pub fn fail(mut self, why: Option<String>) -> Self {
        if why.is_some() {
            self.failure = why;
        }
        self
    }
}

pub fn require_out(g: &GlobalArgs, command: &str) -> CliResult<PathBuf> {
    g.out
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{command} needs --out <path>")))
}

fn run(cli: Cli) -> CliResult<Outcome> {
    let config = io::load_config(cli.global.config.as_deref())?;
    io::check_sections(config.as_ref(), &CONFIG_SECTIONS)?;
    let g = &cli.global;
    let cfg = config.as_ref();
    match cli.command {
        Command::ScoreCot(a) => score::run(g, cfg, a),
        Command::TrainGrpo(a) => train::run(g, cfg, a),
        Command::Kg(c) => kg::run(g, cfg, c),
        Command::FusionCheck(a) => fusion_check::run(g, cfg, a),
        Command::GenSynthetic(a) => synth::run(g, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { io::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let timing = cli.global.timing;
    let started = Instant::now();
    match run(cli) {
        Ok(mut outcome) => {
            if timing {
                outcome.report["wall_clock_ms"] = Value::from(started.elapsed().as_secs_f64() * 1e3);
            }
            let text = serde_json::to_string_pretty(&outcome.report).expect("reports serialize") + "\n";
            // a closed stdout (e.g. piped into head) is not an error of the run
            let _ = std::io::stdout().write_all(text.as_bytes());
            match outcome.failure {
                Some(why) => {
                    eprintln!("{why}");
                    ExitCode::from(io::EXIT_CHECK)
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
