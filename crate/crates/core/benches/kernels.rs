//! Full-precision vs packed convolution, and one worker vs the default pool
//! for batched unit inference.
//!
//! Build with `--no-default-features` to time the sequential fallback of the
//! batch helpers instead of rayon.

use std::hint::black_box;

use bdc_core::binarize::BinaryConvParams;
use bdc_core::bitconv::{conv2d_bit, conv2d_fp, pack_activation, ConvGeometry};
use bdc_core::params::ParamStore;
use bdc_core::rng::rng_from_seed;
use bdc_core::tensor::Tensor;
use bdc_core::units::{BdcUnit, BdcUnitConfig, Eager, Precision, Variant};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

fn pm1(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(dims, |_| if rng.random::<bool>() { 1.0 } else { -1.0 }).unwrap()
}

fn conv_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv");
    for (k, ch, hw) in [(1, 64, 16), (3, 64, 16), (3, 128, 8)] {
        let g = ConvGeometry::same(ch, ch, k, 1, hw, hw).unwrap();
        let x = pm1(&g.input_dims(), 1);
        let mut rng = rng_from_seed(2);
        let latent = Tensor::from_fn(&g.weight_dims(), |_| rng.random_range(-1.0..1.0)).unwrap();
        let params = BinaryConvParams::new(latent, 1.0).unwrap();
        let w = params.effective_weights();
        let xb = pack_activation(&x).unwrap();
        let id = format!("k{k}_c{ch}_{hw}x{hw}");
        group.bench_with_input(BenchmarkId::new("fp", &id), &g, |b, g| {
            b.iter(|| conv2d_fp(black_box(&x), &w, g, -1.0).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("bit", &id), &g, |b, g| {
            b.iter(|| conv2d_bit(black_box(&xb), &params, g).unwrap())
        });
    }
    group.finish();
}

fn batched_unit(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let unit = BdcUnit::register(
        &mut store,
        &mut rng_from_seed(3),
        "u",
        BdcUnitConfig::new(Variant::V3, 2, 32),
        Precision::Binary,
    )
    .unwrap();
    let batch: Vec<Tensor> = (0..16).map(|i| pm1(&[32, 16, 16], 10 + i)).collect();
    let mut group = c.benchmark_group("unit_batch16");
    let default_threads = rayon::current_num_threads();
    for threads in [1, default_threads] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        group.bench_function(BenchmarkId::new("threads", threads), |b| {
            b.iter(|| {
                pool.install(|| {
                    let mut e = Eager::inference(&store);
                    unit.forward(&mut e, black_box(&batch)).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv_kernels, batched_unit);
criterion_main!(benches);
