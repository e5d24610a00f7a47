use std::hint::black_box;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use bdc_core::analysis::cost::OPS_DIVISOR;
use bdc_core::binarize::BinaryConvParams;
use bdc_core::bitconv::{check_equivalence, conv2d_bit, conv2d_fp, pack_activation, ConvGeometry};
use bdc_core::rng::stream_rng;
use bdc_core::Tensor;
use clap::Args;
use rand::Rng;

use crate::error::{CliError, Outcome};
use crate::report::{num, CsvOut};

pub const HEADER: [&str; 6] = ["geometry", "ns_fp", "ns_bit", "speedup", "model_speedup", "max_deviation"];

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Square kernel size.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Input and output channels.
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    /// Height and width of the input map.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Timed calls per kernel; the median is reported.
    #[arg(long, default_value_t = 20)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn median_ns(reps: usize, mut f: impl FnMut()) -> f64 {
    let mut t: Vec<f64> = (0..reps)
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed().as_nanos() as f64
        })
        .collect();
    t.sort_by(f64::total_cmp);
    let m = t.len() / 2;
    if t.len() % 2 == 1 {
        t[m]
    } else {
        0.5 * (t[m - 1] + t[m])
    }
}

/// One row. The packed path is timed on an already packed activation; the
/// float path convolves the same ±1 input with the scaled sign weights.
/// Timing is skipped when the two paths disagree.
pub fn run(a: &BenchArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    if a.repetitions == 0 {
        return Err(CliError::Config("repetitions must be positive".into()));
    }
    let g = ConvGeometry::same(a.channels, a.channels, a.k, a.stride, a.size, a.size)
        .and_then(|g| g.validate().map(|_| g))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let name = format!("k{}_c{}_{}x{}_s{}", a.k, a.channels, a.size, a.size, a.stride);
    let mut out = CsvOut::open(a.report.as_deref(), stdout, &HEADER)?;

    let eq = check_equivalence(&g, a.seed)?;
    if eq.exact_deviation != 0.0 {
        out.row([name, String::new(), String::new(), String::new(), OPS_DIVISOR.to_string(), num(eq.exact_deviation)])?;
        return Ok(Outcome::Fail);
    }

    let mut rng = stream_rng(a.seed, 1);
    let x = Tensor::from_fn(&g.input_dims(), |_| if rng.random::<bool>() { 1.0 } else { -1.0 })?;
    let latent = Tensor::from_fn(&g.weight_dims(), |_| rng.random_range(-1.0..1.0))?;
    let params = BinaryConvParams::new(latent, 1.0)?;
    let w = params.effective_weights();
    let xb = pack_activation(&x)?;
    let mut failure = None;
    let ns_fp = median_ns(a.repetitions, || {
        if let Err(e) = conv2d_fp(black_box(&x), &w, &g, -1.0) {
            failure = Some(e);
        }
    });
    let ns_bit = median_ns(a.repetitions, || {
        if let Err(e) = conv2d_bit(black_box(&xb), &params, &g) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    out.row([
        name,
        num(ns_fp),
        num(ns_bit),
        num(ns_fp / ns_bit),
        OPS_DIVISOR.to_string(),
        num(eq.exact_deviation),
    ])?;
    Ok(Outcome::Pass)
}
