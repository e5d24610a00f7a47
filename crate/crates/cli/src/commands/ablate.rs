use std::io::Write;
use std::path::PathBuf;

use bdc_core::occtoy::{ablation_jobs, run_job, AblationGroup, AblationRow};
use bdc_core::par;
use clap::Args;

use super::load_config;
use crate::error::{CliError, Outcome};
use crate::report::{num, CsvOut};

pub const HEADER: [&str; 14] = [
    "group",
    "label",
    "variant",
    "first_kernel",
    "second_kernel",
    "n_mulbiconv",
    "miou",
    "final_loss",
    "ops_f",
    "ops_b",
    "params_f",
    "params_b",
    "total_ops",
    "total_params",
];

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// Base configuration: task, training budget, alpha and scope.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated subset of breakdown, kernel, mulbiconv.
    #[arg(long, default_value = "breakdown,kernel,mulbiconv")]
    pub groups: String,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn parse_groups(s: &str) -> Result<Vec<AblationGroup>, CliError> {
    let groups = s
        .split(',')
        .map(|g| g.trim().parse().map_err(|e: bdc_core::Error| CliError::Config(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(groups)
}

pub fn row_fields(r: &AblationRow) -> Vec<String> {
    let c = &r.cost;
    vec![
        r.group.name().into(),
        r.label.clone(),
        r.unit.variant.to_string(),
        r.unit.first_kernel.to_string(),
        r.unit.second_kernel.to_string(),
        r.unit.effective_n().to_string(),
        num(r.miou),
        num(r.final_loss),
        c.ops_f.to_string(),
        num(c.ops_b()),
        c.params_f.to_string(),
        num(c.params_b()),
        num(c.total_ops()),
        num(c.total_params()),
    ]
}

/// Runs the jobs concurrently and writes rows in job order. Writing stops
/// at the first failed run; rows before it stay in the file.
pub fn run(a: &AblateArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = Some(s);
        cfg.epochs = None;
    }
    cfg.validate()?;
    let groups = parse_groups(&a.groups)?;
    let spec = cfg.net_spec();
    let tcfg = cfg.train_config();
    let jobs = ablation_jobs(&groups);
    let results = par::map_slice(&jobs, |job| run_job(job, &spec, &tcfg));

    let path = a.report.as_deref().or(cfg.report.as_deref());
    let mut out = CsvOut::open(path, stdout, &HEADER)?;
    let mut finite = true;
    for r in results {
        let r = r?;
        finite &= r.miou.is_finite() && r.final_loss.is_finite();
        out.row(row_fields(&r))?;
    }
    if !finite {
        return Err(CliError::Verification("non-finite loss or mIoU in an ablation run".into()));
    }
    Ok(Outcome::Pass)
}
