//! Reverse-mode differentiation over the unit primitives, AdamW, and a
//! finite-difference checker.

pub mod gradcheck;
pub mod optim;
pub mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use tape::{apply_bn_updates, forward_record, Backward, BnUpdate, Gradients, Tape, Var};

#[cfg(test)]
mod tests;
