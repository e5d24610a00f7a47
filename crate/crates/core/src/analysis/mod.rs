//! Gradient-error analysis of binarization and the op/parameter cost model.

pub mod cost;
pub mod erf;
pub mod theorem;

pub use cost::{cost_of_layer, cost_of_layers, cost_of_network, CostReport, LayerDesc, NetworkCost};
pub use theorem::{
    abs_error_stats, analytic_abs_error_constant, gradient_error_experiment, monte_carlo_abs_error, Estimate,
    ExperimentOptions, GradErrorReport,
};
