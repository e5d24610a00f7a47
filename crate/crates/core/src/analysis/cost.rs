//! Operation and parameter counting.
//!
//! One multiply-accumulate counts as two ops. Binarized layers are tracked by
//! their full-precision-equivalent integer counts; the reported binarized
//! figures divide those by 64 (ops) and 32 (params).

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use crate::bitconv::ConvGeometry;
use crate::error::Result;

pub const OPS_DIVISOR: u64 = 64;
pub const PARAMS_DIVISOR: u64 = 32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct CostReport {
    pub ops_f: u64,
    /// Full-precision-equivalent ops of binarized layers.
    pub ops_b_equiv: u64,
    pub params_f: u64,
    /// Full-precision-equivalent parameters of binarized layers.
    pub params_b_equiv: u64,
}

impl CostReport {
    pub fn ops_b(&self) -> f64 {
        self.ops_b_equiv as f64 / OPS_DIVISOR as f64
    }

    pub fn params_b(&self) -> f64 {
        self.params_b_equiv as f64 / PARAMS_DIVISOR as f64
    }

    pub fn total_ops(&self) -> f64 {
        self.ops_f as f64 + self.ops_b()
    }

    pub fn total_params(&self) -> f64 {
        self.params_f as f64 + self.params_b()
    }

    /// Every element of every trainable tensor, binarized or not.
    pub fn param_elements(&self) -> u64 {
        self.params_f + self.params_b_equiv
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

impl Add for CostReport {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            ops_f: self.ops_f + o.ops_f,
            ops_b_equiv: self.ops_b_equiv + o.ops_b_equiv,
            params_f: self.params_f + o.params_f,
            params_b_equiv: self.params_b_equiv + o.params_b_equiv,
        }
    }
}

impl AddAssign for CostReport {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for CostReport {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Cost of one convolution.
pub fn cost_of_layer(g: &ConvGeometry, binarized: bool) -> Result<CostReport> {
    g.validate()?;
    let k2 = (g.kernel * g.kernel) as u64;
    let params = k2 * g.c_in as u64 * g.c_out as u64;
    let ops = 2 * params * g.h_out() as u64 * g.w_out() as u64;
    Ok(if binarized {
        CostReport {
            ops_b_equiv: ops,
            params_b_equiv: params,
            ..Default::default()
        }
    } else {
        CostReport {
            ops_f: ops,
            params_f: params,
            ..Default::default()
        }
    })
}

/// One costed layer of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDesc {
    Conv { geometry: ConvGeometry, binarized: bool },
    /// Full-precision per-channel parameters (batch norm, RPReLU,
    /// redistribution, bias) that are not counted as ops.
    Elementwise { params: u64 },
}

impl LayerDesc {
    pub fn cost(&self) -> Result<CostReport> {
        match *self {
            LayerDesc::Conv { geometry, binarized } => cost_of_layer(&geometry, binarized),
            LayerDesc::Elementwise { params } => Ok(CostReport {
                params_f: params,
                ..Default::default()
            }),
        }
    }
}

pub fn cost_of_layers(layers: &[LayerDesc]) -> Result<CostReport> {
    layers.iter().map(LayerDesc::cost).sum()
}

/// Named groups of layers, e.g. pipeline stages.
pub type Layout = Vec<(String, Vec<LayerDesc>)>;

/// Per-stage and total cost.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NetworkCost {
    pub stages: Vec<(String, CostReport)>,
    pub total: CostReport,
}

pub fn cost_of_network(layout: &[(String, Vec<LayerDesc>)]) -> Result<NetworkCost> {
    let stages = layout
        .iter()
        .map(|(name, layers)| Ok((name.clone(), cost_of_layers(layers)?)))
        .collect::<Result<Vec<_>>>()?;
    let total = stages.iter().map(|(_, c)| *c).sum();
    Ok(NetworkCost { stages, total })
}
