use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use incident_align::fusion::check::{self, CheckResult, CheckSizes, Kernels, Tolerances};
use incident_align::fusion::{project, FeatureMatrix, ProjectionParams};
use incident_align::Result;

use crate::io::{self, CliResult};
use crate::{GlobalArgs, Outcome};

#[derive(Args, Debug)]
pub struct FusionArgs {
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub n_v: Option<usize>,
    #[arg(long)]
    pub d_v: Option<usize>,
    #[arg(long)]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub d_llm: Option<usize>,
    #[arg(long)]
    pub l_t: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    /// Perturb the projection kernel so the checks must fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
struct FusionConfig {
    sizes: CheckSizes,
    tolerances: Tolerances,
}

#[derive(Serialize)]
struct ResolvedConfig {
    sizes: CheckSizes,
    tolerances: Tolerances,
    inject_fault: bool,
}

#[derive(Serialize)]
struct Outputs {
    passed: bool,
    checks: Vec<CheckResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fixture: Option<PathBuf>,
}

const DEFAULT_FIXTURE: &str = "fusion-failure.json";

fn faulty_project(x: &FeatureMatrix, p: &ProjectionParams) -> Result<FeatureMatrix> {
    let mut h = project(x, p)?;
    if let Some(v) = h.data.first_mut() {
        *v += 1e-3;
    }
    Ok(h)
}

pub fn run(g: &GlobalArgs, config: Option<&Value>, a: FusionArgs) -> CliResult<Outcome> {
    let mut cfg = io::overlay(FusionConfig::default(), io::section(config, "fusion"), "fusion")?;
    let s = &mut cfg.sizes;
    for (flag, slot) in [
        (a.instances, &mut s.instances),
        (a.n_v, &mut s.n_v),
        (a.d_v, &mut s.d_v),
        (a.d_h, &mut s.d_h),
        (a.d_llm, &mut s.d_llm),
        (a.l_t, &mut s.l_t),
        (a.head_dim, &mut s.head_dim),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    let kernels = if a.inject_fault {
        Kernels {
            project: faulty_project,
            ..Kernels::default()
        }
    } else {
        Kernels::default()
    };
    let report = check::run(g.seed, cfg.sizes, cfg.tolerances, kernels)?;

    let fixture = match &report.failing {
        Some(inst) => {
            let path = g.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_FIXTURE));
            io::write_json(&path, inst)?;
            Some(path)
        }
        None => None,
    };
    let failure = (!report.passed).then(|| {
        let names: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        format!("fusion checks failed: {}", names.join(", "))
    });
    let resolved = ResolvedConfig {
        sizes: cfg.sizes,
        tolerances: cfg.tolerances,
        inject_fault: a.inject_fault,
    };
    let outputs = Outputs {
        passed: report.passed,
        checks: report.checks,
        fixture,
    };
    Ok(Outcome::new("fusion-check", g, resolved, outputs, Vec::new()).fail(failure))
}
