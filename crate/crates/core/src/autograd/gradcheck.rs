//! Central-difference gradient checking.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use crate::units::exec::{Batch, Mode, Network, SignMode};

use super::tape::forward_record;

/// Entries whose combined magnitude falls below this are skipped.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter or input element with the largest error.
    pub worst: String,
    /// Number of compared elements.
    pub checked: usize,
    /// Elements whose two evaluations straddled an RPReLU threshold, where
    /// the loss is not differentiable within the step.
    pub skipped_kinks: usize,
}

fn rel_error(a: f64, n: f64) -> Option<f64> {
    (a.abs() + n.abs() > MAGNITUDE_FLOOR).then(|| (a - n).abs() / a.abs().max(n.abs()))
}

fn weighted_sum(y: &Batch, r: &Batch) -> f64 {
    y.iter()
        .zip(r)
        .map(|(a, b)| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>())
        .sum()
}

/// Compares tape gradients of `L = sum(r * net(x))`, with `r` drawn from
/// `seed`, against central differences over every trainable parameter
/// element and every input element. Elements whose perturbed evaluations
/// take different RPReLU branches are skipped and counted. `mode.sign` must be
/// [`SignMode::Surrogate`] so the network is differentiable; binarized
/// weights are perturbed without refreshing their scale.
pub fn finite_diff_check<N: Network>(
    net: &N,
    store: &ParamStore,
    mode: Mode,
    x: &Batch,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if mode.sign != SignMode::Surrogate {
        return Err(Error::InvalidArgument(
            "finite-difference checks need the surrogate sign".into(),
        ));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be positive")));
    }
    let (tape, out) = forward_record(net, store, mode, x.clone())?;
    let mut rng = rng_from_seed(seed);
    let r: Batch = tape
        .value(out)?
        .iter()
        .map(|t| Tensor::from_fn(t.dims(), |_| StandardNormal.sample(&mut rng)))
        .collect::<Result<_>>()?;
    let analytic = tape.backward(out, r.clone())?;
    drop(tape);

    let loss = |s: &ParamStore, xx: &Batch| -> Result<(f64, Vec<bool>)> {
        let (tape, out) = forward_record(net, s, mode, xx.clone())?;
        Ok((weighted_sum(tape.value(out)?, &r), tape.branch_pattern()))
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped_kinks: 0,
    };
    let mut record = |a: f64, (up, pu): (f64, Vec<bool>), (down, pd): (f64, Vec<bool>), what: &dyn Fn() -> String| {
        if pu != pd {
            report.skipped_kinks += 1;
            return;
        }
        let n = (up - down) / (2.0 * epsilon);
        if let Some(e) = rel_error(a, n) {
            report.checked += 1;
            if e > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = what();
            }
        }
    };

    let mut work = store.clone();
    for (id, g) in &analytic.params {
        for i in 0..g.len() {
            let orig = work.tensor(*id).data()[i];
            work.tensor_mut(*id).data_mut()[i] = orig + epsilon;
            let up = loss(&work, x)?;
            work.tensor_mut(*id).data_mut()[i] = orig - epsilon;
            let down = loss(&work, x)?;
            work.tensor_mut(*id).data_mut()[i] = orig;
            record(g.data()[i], up, down, &|| format!("{}[{i}]", store.name(*id)));
        }
    }
    let mut xw = x.clone();
    for s in 0..x.len() {
        for i in 0..x[s].len() {
            let orig = x[s].data()[i];
            xw[s].data_mut()[i] = orig + epsilon;
            let up = loss(store, &xw)?;
            xw[s].data_mut()[i] = orig - epsilon;
            let down = loss(store, &xw)?;
            xw[s].data_mut()[i] = orig;
            record(analytic.inputs[0][s].data()[i], up, down, &|| format!("input[{s}][{i}]"));
        }
    }
    Ok(report)
}
