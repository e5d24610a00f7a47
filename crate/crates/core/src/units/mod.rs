//! Layer primitives, BDC units and the shape-changing conv modules.

pub mod exec;
pub mod layers;
pub mod module;
pub mod unit;

pub use exec::{Batch, BnMode, ConvSpec, Eager, Exec, Mode, Network, SignMode};
pub use layers::{BnIds, RPReLUParams, RedistIds, RprIds, ViewScatter};
pub use module::{module_forward, ConvModule, ModuleKind};
pub use unit::{
    bdc_forward, channel_weight_branch, mulbiconv, BdcPath, BdcUnit, BdcUnitConfig, ConvSlot, MulBiconv,
    MulBiconvStage, Precision, Variant,
};
