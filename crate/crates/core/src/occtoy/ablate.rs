//! Ablation sweeps: unit variants, kernel plans and MulBiconv depth.

use crate::analysis::cost::{cost_of_network, CostReport};
use crate::error::{Error, Result};
use crate::par;
use crate::params::ParamStore;
use crate::units::unit::{BdcUnitConfig, Variant};

use super::net::{NetSpec, ToyNet};
use super::train::{run, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationGroup {
    /// V0 to V3 with default kernels.
    Breakdown,
    /// `3->1`, `3->3`, `1->1` on V1 and `3->3->1` on V2 with `N = 1`.
    Kernel,
    /// V3 with `N` from 0 to 4.
    MulBiconv,
}

impl AblationGroup {
    pub const ALL: [AblationGroup; 3] = [AblationGroup::Breakdown, AblationGroup::Kernel, AblationGroup::MulBiconv];

    pub fn name(self) -> &'static str {
        match self {
            AblationGroup::Breakdown => "breakdown",
            AblationGroup::Kernel => "kernel",
            AblationGroup::MulBiconv => "mulbiconv",
        }
    }

    /// Row label and unit settings of every run in the group.
    pub fn variants(self) -> Vec<(String, BdcUnitConfig)> {
        match self {
            AblationGroup::Breakdown => Variant::ALL
                .iter()
                .map(|&v| (v.name().to_string(), BdcUnitConfig::new(v, 1, 0)))
                .collect(),
            AblationGroup::Kernel => vec![
                ("3->1".into(), BdcUnitConfig::new(Variant::V1, 0, 0).with_kernels(3, 1)),
                ("3->3".into(), BdcUnitConfig::new(Variant::V1, 0, 0).with_kernels(3, 3)),
                ("1->1".into(), BdcUnitConfig::new(Variant::V1, 0, 0).with_kernels(1, 1)),
                ("3->3->1".into(), BdcUnitConfig::new(Variant::V2, 1, 0).with_kernels(3, 3)),
            ],
            AblationGroup::MulBiconv => (0..=4)
                .map(|n| (format!("N={n}"), BdcUnitConfig::new(Variant::V3, n, 0)))
                .collect(),
        }
    }
}

impl std::str::FromStr for AblationGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation group {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub group: AblationGroup,
    pub label: String,
    pub unit: BdcUnitConfig,
    pub miou: f64,
    pub final_loss: f64,
    pub cost: CostReport,
}

/// Cost of the network a unit setting produces, without training.
pub fn network_cost(spec: &NetSpec, unit: BdcUnitConfig) -> Result<CostReport> {
    let spec = NetSpec { unit, ..*spec };
    let mut store = ParamStore::new();
    let net = ToyNet::build(&spec, &mut store, 0)?;
    Ok(cost_of_network(&net.layout(&store)?)?.total)
}

/// One training run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationJob {
    pub group: AblationGroup,
    pub label: String,
    pub unit: BdcUnitConfig,
}

/// Jobs of every group, in group order then variant order.
pub fn ablation_jobs(groups: &[AblationGroup]) -> Vec<AblationJob> {
    groups
        .iter()
        .flat_map(|&group| {
            group
                .variants()
                .into_iter()
                .map(move |(label, unit)| AblationJob { group, label, unit })
        })
        .collect()
}

/// Trains one job with `spec`'s alpha and scope and `cfg`'s seed and budget.
pub fn run_job(job: &AblationJob, spec: &NetSpec, cfg: &TrainConfig) -> Result<AblationRow> {
    let unit = BdcUnitConfig {
        alpha: spec.unit.alpha,
        ..job.unit
    };
    let spec = NetSpec { unit, ..*spec };
    let (net, store, report) = run(&spec, cfg)?;
    Ok(AblationRow {
        group: job.group,
        label: job.label.clone(),
        unit,
        miou: report.miou,
        final_loss: report.final_loss,
        cost: cost_of_network(&net.layout(&store)?)?.total,
    })
}

/// Trains every variant of every group with the same seed and budget.
/// Runs may execute concurrently; rows come back in job order.
pub fn ablate(groups: &[AblationGroup], spec: &NetSpec, cfg: &TrainConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    par::map_slice(&ablation_jobs(groups), |job| run_job(job, spec, cfg))
        .into_iter()
        .collect()
}
