use std::io::Write;
use std::path::PathBuf;

use bdc_core::analysis::cost::Layout;
use bdc_core::analysis::{cost_of_network, CostReport, LayerDesc};
use bdc_core::bitconv::ConvGeometry;
use bdc_core::occtoy::{Scope, ToyNet};
use bdc_core::params::ParamStore;
use clap::Args;

use super::load_config;
use crate::error::{CliError, Outcome};
use crate::report::{num, CsvOut};

pub const HEADER: [&str; 9] = [
    "stage",
    "ops_f",
    "ops_b",
    "params_f",
    "params_b",
    "ops_b_equiv",
    "params_b_equiv",
    "total_ops",
    "total_params",
];

#[derive(Debug, Clone, Args)]
pub struct CostArgs {
    /// Network configuration; ignored with `--layer` or `--custom`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `[model] scope`.
    #[arg(long)]
    pub scope: Option<String>,
    /// Custom layer `KIND:K:CIN:COUT:H:W[:STRIDE]` with KIND `fp` or `bin`
    /// and same padding. Repeatable; each layer becomes its own stage.
    #[arg(long = "layer")]
    pub layers: Vec<String>,
    /// Cost only the `--layer` list, even when it is empty.
    #[arg(long)]
    pub custom: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn parse_layer(s: &str) -> Result<LayerDesc, CliError> {
    let bad = |why: &str| CliError::Config(format!("layer {s:?}: {why}"));
    let parts: Vec<&str> = s.split(':').collect();
    if !(6..=7).contains(&parts.len()) {
        return Err(bad("expected KIND:K:CIN:COUT:H:W[:STRIDE]"));
    }
    let binarized = match parts[0] {
        "fp" => false,
        "bin" => true,
        _ => return Err(bad("KIND must be fp or bin")),
    };
    let n = parts[1..]
        .iter()
        .map(|p| p.parse::<usize>().map_err(|_| bad("sizes must be non-negative integers")))
        .collect::<Result<Vec<_>, _>>()?;
    let stride = n.get(5).copied().unwrap_or(1);
    let geometry = ConvGeometry::same(n[1], n[2], n[0], stride, n[3], n[4]).map_err(|e| bad(&e.to_string()))?;
    Ok(LayerDesc::Conv { geometry, binarized })
}

fn fields(stage: &str, c: &CostReport) -> Vec<String> {
    vec![
        stage.into(),
        c.ops_f.to_string(),
        num(c.ops_b()),
        c.params_f.to_string(),
        num(c.params_b()),
        c.ops_b_equiv.to_string(),
        c.params_b_equiv.to_string(),
        num(c.total_ops()),
        num(c.total_params()),
    ]
}

/// One row per stage followed by a `total` row.
pub fn run(a: &CostArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let layout: Layout = if a.custom || !a.layers.is_empty() {
        a.layers
            .iter()
            .enumerate()
            .map(|(i, l)| Ok((format!("layer{i}"), vec![parse_layer(l)?])))
            .collect::<Result<_, CliError>>()?
    } else {
        let mut cfg = load_config(a.config.as_deref())?;
        if let Some(s) = &a.scope {
            cfg.scope = s.parse::<Scope>().map_err(|e| CliError::Config(e.to_string()))?;
        }
        cfg.validate()?;
        let mut store = ParamStore::new();
        let net = ToyNet::build(&cfg.net_spec(), &mut store, 0)?;
        net.layout(&store)?
    };
    let cost = cost_of_network(&layout)?;
    let mut out = CsvOut::open(a.report.as_deref(), stdout, &HEADER)?;
    for (stage, c) in &cost.stages {
        out.row(fields(stage, c))?;
    }
    out.row(fields("total", &cost.total))?;
    Ok(Outcome::Pass)
}
