use std::io::Write;
use std::path::PathBuf;

use bdc_core::occtoy::{evaluate, run as train_toy, ToyNet, TrainReport};
use bdc_core::params::ParamStore;
use clap::Args;

use super::load_config;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Outcome};
use crate::report::{num, CsvOut};

pub const HEADER: [&str; 2] = ["metric", "value"];

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `[run] seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `[train] steps` and clears `epochs`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `[output] report`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Overrides `[output] checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Configuration the checkpoint was trained with.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl TrainArgs {
    pub fn effective_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.steps = Some(s);
            cfg.epochs = None;
        }
        if self.report.is_some() {
            cfg.report.clone_from(&self.report);
        }
        if self.checkpoint.is_some() {
            cfg.checkpoint.clone_from(&self.checkpoint);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn iou_rows(per_class: &[Option<f64>]) -> impl Iterator<Item = [String; 2]> + '_ {
    per_class
        .iter()
        .enumerate()
        .map(|(c, v)| [format!("iou_class_{c}"), v.map(num).unwrap_or_default()])
}

/// `metric,value` rows: config hash, seed, step count, losses, scores,
/// per-class IoU (empty when a class never occurs), then every step loss.
pub fn report_rows(r: &TrainReport) -> Vec<[String; 2]> {
    let mut rows = vec![
        ["config_hash".into(), r.config_hash.clone().unwrap_or_default()],
        ["seed".into(), r.seed.to_string()],
        ["steps".into(), r.step_losses.len().to_string()],
        ["initial_loss".into(), num(r.initial_loss)],
        ["final_loss".into(), num(r.final_loss)],
        ["miou".into(), num(r.miou)],
        ["baseline_miou".into(), num(r.baseline_miou)],
        ["test_loss".into(), num(r.test_loss)],
    ];
    rows.extend(iou_rows(&r.per_class_iou));
    rows.extend(r.step_losses.iter().enumerate().map(|(i, l)| [format!("loss_step_{i}"), num(*l)]));
    rows
}

pub fn run_train(a: &TrainArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<Outcome, CliError> {
    let cfg = a.effective_config()?;
    let (_, store, mut report) = train_toy(&cfg.net_spec(), &cfg.train_config())?;
    report.config_hash = Some(cfg.hash());
    if let Some(p) = &cfg.checkpoint {
        Checkpoint::from_store(&store).save(p)?;
    }
    let mut out = CsvOut::open(cfg.report.as_deref(), stdout, &HEADER)?;
    for row in report_rows(&report) {
        out.row(row)?;
    }
    writeln!(stderr, "wall time: {:.3} s", report.wall_time.as_secs_f64())?;
    Ok(Outcome::Pass)
}

/// Rebuilds the network of `--config`, loads the checkpoint into it and
/// scores the held-out split regenerated from the same seed.
pub fn run_eval(a: &EvalArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let tcfg = cfg.train_config();
    let spec = tcfg.net_spec(&cfg.net_spec());
    let mut store = ParamStore::new();
    let net = ToyNet::build(&spec, &mut store, 0)?;
    Checkpoint::load(&a.checkpoint)?.apply_to(&mut store)?;
    let data = tcfg.dataset()?;
    let e = evaluate(&net, &store, &data.test)?;
    let mut out = CsvOut::open(a.report.as_deref(), stdout, &HEADER)?;
    out.row(["config_hash".into(), cfg.hash()])?;
    out.row(["miou".into(), num(e.iou.mean)])?;
    out.row(["test_loss".into(), num(e.loss)])?;
    for row in iou_rows(&e.iou.per_class) {
        out.row(row)?;
    }
    Ok(Outcome::Pass)
}
