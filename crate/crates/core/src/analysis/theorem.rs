//! Binarization error of Gaussian inputs and its effect on weight
//! gradients.
//!
//! For `x ~ N(0, 1)` the binarization error `eps = sign(x) - x` has
//! `E|eps| = 2 [erf(1/sqrt 2) - 1/2 - 1/sqrt(2 pi) + 2/sqrt(2 pi e)]`.
//! Because `|eps| = ||x| - 1|` depends only on `|x|` while everything
//! downstream of a sign sees only `sign(x)`, the two are independent and the
//! expected element-wise absolute gradient error factorizes into `E|eps|`
//! times the summed downstream factors.

use std::f64::consts::{E, PI};

use rand_distr::{Distribution, Normal, StandardNormal};

use crate::binarize::sign;
use crate::bitconv::{conv2d_fp, conv2d_fp_backward_input, conv2d_fp_backward_weight, ConvGeometry};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{derive_seed, stream_rng, Rng};
use crate::tensor::Tensor;

use super::erf::erf;

/// `E|x - sign(x)|` for standard normal `x`.
pub fn analytic_abs_error_constant() -> f64 {
    2.0 * (erf(1.0 / 2f64.sqrt()) - 0.5 - 1.0 / (2.0 * PI).sqrt() + 2.0 / (2.0 * PI * E).sqrt())
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: u64,
}

impl Estimate {
    /// `|mean - target|` in standard errors (infinite if the error is zero
    /// and the mean differs).
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.mean - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.stderr
        }
    }
}

/// Running sums combined in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn merge(self, o: Self) -> Self {
        Self {
            n: self.n + o.n,
            sum: self.sum + o.sum,
            sum_sq: self.sum_sq + o.sum_sq,
        }
    }

    fn estimate(&self) -> Estimate {
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = if self.n > 1 {
            ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr: (var / n).sqrt(),
            samples: self.n,
        }
    }
}

/// Mean and standard error of `|x - sign(x)|` over given inputs.
pub fn abs_error_stats(xs: &[f64]) -> Result<Estimate> {
    if xs.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let mut m = Moments::default();
    for &x in xs {
        m.push((x - sign(x)).abs());
    }
    Ok(m.estimate())
}

const MC_CHUNK: u64 = 1 << 16;

/// Monte-Carlo estimate of `E|x - sign(x)|`, `x ~ N(0, 1)`. Chunks draw from
/// independent streams derived from `seed`, so the result does not depend
/// on the thread count.
pub fn monte_carlo_abs_error(n_samples: u64, seed: u64) -> Result<Estimate> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("at least one sample is required".into()));
    }
    let chunks = n_samples.div_ceil(MC_CHUNK);
    let parts = par::map_range(chunks as usize, |c| {
        let mut rng = stream_rng(seed, c as u64);
        let len = MC_CHUNK.min(n_samples - c as u64 * MC_CHUNK);
        let mut m = Moments::default();
        for _ in 0..len {
            let x: f64 = StandardNormal.sample(&mut rng);
            m.push((x - sign(x)).abs());
        }
        m
    });
    Ok(parts.into_iter().fold(Moments::default(), Moments::merge).estimate())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentOptions {
    /// Spatial size of the square feature maps.
    pub spatial: usize,
    /// Multiplies the binarization error before it enters the gradient.
    pub epsilon_scale: f64,
    /// Draw inputs from `{-1, +1}` so that the error is exactly zero.
    pub exact_inputs: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            spatial: 16,
            epsilon_scale: 1.0,
            exact_inputs: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradErrorReport {
    pub kernel: usize,
    pub channels: usize,
    /// Measured mean element-wise absolute gradient error.
    pub empirical: f64,
    /// Standard error of `empirical` across trials.
    pub empirical_stderr: f64,
    /// `E|eps|` times the independently estimated downstream factor sum.
    pub predicted: f64,
    pub ratio: f64,
    pub relative_deviation: f64,
    pub trials: usize,
    /// Mean `|dL/dw(binarized) - dL/dw(full precision)|`, with signs
    /// allowed to cancel inside the sums.
    pub aggregate_abs_diff: f64,
}

struct Trial {
    /// Binarization error of the layer input, scaled.
    eps: Tensor,
    /// `A[o, p, q] = sigma'(y[o, p, q]) * sum |w1[o', o, m', n']| * |r[o', ...]|`.
    factors: Tensor,
    /// Signed upstream gradient of the layer output.
    delta: Tensor,
}

fn gaussian(rng: &mut Rng, dims: &[usize], std: f64) -> Result<Tensor> {
    let d = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Tensor::from_fn(dims, |_| d.sample(rng))
}

fn run_trial(g: &ConvGeometry, opts: &ExperimentOptions, rng: &mut Rng) -> Result<Trial> {
    let (c, k) = (g.c_in, g.kernel);
    let x_hat = if opts.exact_inputs {
        Tensor::from_fn(&g.input_dims(), |_| if rand::Rng::random_bool(rng, 0.5) { 1.0 } else { -1.0 })?
    } else {
        gaussian(rng, &g.input_dims(), 1.0)?
    };
    let w0 = gaussian(rng, &g.weight_dims(), 1.0 / ((c * k * k) as f64).sqrt())?;
    let w1 = gaussian(rng, &g.weight_dims(), 1.0 / (c as f64).sqrt())?;
    let r = gaussian(rng, &g.output_dims(), 1.0)?;

    let xb = x_hat.map(sign);
    let eps = xb.zip_map(&x_hat, |b, h| opts.epsilon_scale * (b - h))?;
    let y = conv2d_fp(&xb, &w0, g, 0.0)?;
    let dsigma = y.map(|v| 1.0 - v.tanh().powi(2));
    let upstream = conv2d_fp_backward_input(&r, &w1, g)?;
    let abs_upstream = conv2d_fp_backward_input(&r.map(f64::abs), &w1.map(f64::abs), g)?;
    Ok(Trial {
        eps,
        factors: dsigma.zip_map(&abs_upstream, |a, b| a * b)?,
        delta: dsigma.zip_map(&upstream, |a, b| a * b)?,
    })
}

/// Two-layer chain `conv (k x k, C -> C) -> tanh -> conv (k x k, C -> C)`
/// on `spatial x spatial` maps. The first layer's weight gradient is taken
/// with binarized inputs and with their full-precision originals; the
/// term-wise absolute difference is compared against `E|eps|` times the
/// downstream factor sum estimated on an independent set of trials.
/// Padded positions carry no error and are excluded from both sides.
pub fn gradient_error_experiment(
    k: usize,
    c_channels: usize,
    n_trials: usize,
    seed: u64,
    opts: &ExperimentOptions,
) -> Result<GradErrorReport> {
    if k != 1 && k != 3 {
        return Err(Error::InvalidKernel(k));
    }
    if n_trials == 0 || c_channels == 0 || opts.spatial == 0 {
        return Err(Error::InvalidArgument("trials, channels and spatial size must be positive".into()));
    }
    let g = ConvGeometry::same(c_channels, c_channels, k, 1, opts.spatial, opts.spatial)?;
    let ones = Tensor::full(&g.input_dims(), 1.0)?;
    let n_weights = g.weight_dims().iter().product::<usize>() as f64;

    let measured = par::map_range(n_trials, |t| -> Result<(f64, f64)> {
        let mut rng = stream_rng(seed, t as u64);
        let tr = run_trial(&g, opts, &mut rng)?;
        let eae = conv2d_fp_backward_weight(&tr.eps.map(f64::abs), &tr.factors, &g, 0.0)?;
        let agg = conv2d_fp_backward_weight(&tr.eps, &tr.delta, &g, 0.0)?;
        Ok((eae.sum() / n_weights, agg.data().iter().map(|v| v.abs()).sum::<f64>() / n_weights))
    });
    let prediction_seed = derive_seed(seed, u64::MAX);
    let factor_sums = par::map_range(n_trials, |t| -> Result<f64> {
        let mut rng = stream_rng(prediction_seed, t as u64);
        let tr = run_trial(&g, opts, &mut rng)?;
        // Sum of factors over the output positions whose (m, n) tap lands
        // inside the input, for every weight element.
        Ok(conv2d_fp_backward_weight(&ones, &tr.factors, &g, 0.0)?.sum() / n_weights)
    });

    let mut emp = Moments::default();
    let mut agg = 0.0;
    for m in measured {
        let (e, a) = m?;
        emp.push(e);
        agg += a;
    }
    let mut fac = 0.0;
    for f in factor_sums {
        fac += f?;
    }
    let est = emp.estimate();
    let abs_eps = if opts.exact_inputs {
        0.0
    } else {
        opts.epsilon_scale.abs() * analytic_abs_error_constant()
    };
    let predicted = abs_eps * fac / n_trials as f64;
    let ratio = if predicted == 0.0 {
        if est.mean == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        est.mean / predicted
    };
    Ok(GradErrorReport {
        kernel: k,
        channels: c_channels,
        empirical: est.mean,
        empirical_stderr: est.stderr,
        predicted,
        ratio,
        relative_deviation: (ratio - 1.0).abs(),
        trials: n_trials,
        aggregate_abs_diff: agg / n_trials as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_parts() {
        let c = analytic_abs_error_constant();
        assert!((c - 0.5354).abs() < 5e-5, "{c}");
        assert!((erf(1.0 / 2f64.sqrt()) - 0.682_689).abs() < 1e-6);
        assert!((2.0 / (2.0 * PI * E).sqrt() - 0.483_941).abs() < 1e-6);
    }

    #[test]
    fn constant_matches_quadrature() {
        // Midpoint rule of |x - sign(x)| * phi(x) over [-12, 12].
        let n = 2_400_000;
        let h = 24.0 / n as f64;
        let s: f64 = (0..n)
            .map(|i| {
                let x = -12.0 + (i as f64 + 0.5) * h;
                (x - sign(x)).abs() * (-0.5 * x * x).exp()
            })
            .sum();
        let q = s * h / (2.0 * PI).sqrt();
        assert!((q - analytic_abs_error_constant()).abs() < 1e-9);
    }

    #[test]
    fn single_input_statistics() {
        let e = abs_error_stats(&[0.2]).unwrap();
        assert_eq!(e.mean, 0.8);
        assert_eq!(e.samples, 1);
        let e = abs_error_stats(&[0.0, -0.5, 2.0]).unwrap();
        assert!((e.mean - (1.0 + 0.5 + 1.0) / 3.0).abs() < 1e-15);
        assert!(abs_error_stats(&[]).is_err());
    }

    #[test]
    fn monte_carlo_agrees_and_repeats() {
        let a = monte_carlo_abs_error(200_000, 7).unwrap();
        assert_eq!(a, monte_carlo_abs_error(200_000, 7).unwrap());
        assert_eq!(a.samples, 200_000);
        assert!(a.z_score(analytic_abs_error_constant()) < 4.0, "{a:?}");
        assert_ne!(a, monte_carlo_abs_error(200_000, 8).unwrap());
        let one = monte_carlo_abs_error(1, 3).unwrap();
        assert_eq!(one.stderr, 0.0);
        assert!(monte_carlo_abs_error(0, 1).is_err());
    }

    #[test]
    fn exact_inputs_give_zero_error() {
        let opts = ExperimentOptions {
            exact_inputs: true,
            spatial: 6,
            ..Default::default()
        };
        let r = gradient_error_experiment(3, 3, 4, 1, &opts).unwrap();
        assert_eq!(r.empirical, 0.0);
        assert_eq!(r.aggregate_abs_diff, 0.0);
    }

    #[test]
    fn error_is_linear_in_epsilon() {
        let base = ExperimentOptions {
            spatial: 8,
            ..Default::default()
        };
        let doubled = ExperimentOptions {
            epsilon_scale: 2.0,
            ..base
        };
        let a = gradient_error_experiment(1, 4, 20, 5, &base).unwrap();
        let b = gradient_error_experiment(1, 4, 20, 5, &doubled).unwrap();
        assert!((b.empirical / a.empirical - 2.0).abs() < 0.1);
        assert!((b.predicted / a.predicted - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_even_kernel() {
        let o = ExperimentOptions::default();
        assert!(matches!(gradient_error_experiment(2, 4, 1, 0, &o), Err(Error::InvalidKernel(2))));
    }

    #[test]
    fn small_run_is_close_to_prediction() {
        let opts = ExperimentOptions {
            spatial: 8,
            ..Default::default()
        };
        let r = gradient_error_experiment(1, 4, 60, 11, &opts).unwrap();
        assert!(r.relative_deviation < 0.1, "{r:?}");
        assert!(r.aggregate_abs_diff < r.empirical);
    }
}
