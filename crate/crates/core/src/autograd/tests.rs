use rand::Rng as _;

use super::*;
use crate::bitconv::{conv2d_bit, pack_activation};
use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::Tensor;
use crate::units::exec::{Batch, BnMode, ConvSpec, Eager, Exec, Mode, Network, SignMode};
use crate::units::layers::{BnIds, RedistIds, RprIds, ViewScatter};
use crate::units::{BdcUnit, BdcUnitConfig, ConvModule, ConvSlot, ModuleKind, Precision, Variant};

const SURROGATE_EVAL: Mode = Mode {
    sign: SignMode::Surrogate,
    bn: BnMode::Eval,
};
const SURROGATE_TRAIN: Mode = Mode {
    sign: SignMode::Surrogate,
    bn: BnMode::Train,
};

fn batch(rng: &mut Rng, n: usize, dims: &[usize], lo: f64, hi: f64) -> Batch {
    (0..n)
        .map(|_| Tensor::from_fn(dims, |_| rng.random_range(lo..hi)).unwrap())
        .collect()
}

fn perturb_all(store: &mut ParamStore, rng: &mut Rng, spread: f64) {
    let ids: Vec<_> = store.trainable_ids();
    for id in ids {
        let name = store.name(id).to_string();
        let jitter = |v: f64, r: &mut Rng| v + r.random_range(-spread..spread);
        let t = store.tensor(id).clone();
        let t = Tensor::new(t.dims(), t.data().iter().map(|&v| jitter(v, rng)).collect()).unwrap();
        store.set(&name, t).unwrap();
    }
    let bufs: Vec<_> = store
        .entries()
        .filter(|(_, e)| !e.trainable)
        .map(|(id, e)| (id, e.name.ends_with("running_var")))
        .collect();
    for (id, is_var) in bufs {
        for v in store.tensor_mut(id).data_mut() {
            *v = if is_var {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-0.3..0.3)
            };
        }
    }
}

/// Single-primitive networks.
enum Prim {
    Redist(RedistIds),
    Sign(f64),
    BinConv(ParamId, ConvSpec),
    FpConv(ParamId, Option<ParamId>, ConvSpec),
    Bn(BnIds),
    Rprelu(RprIds),
    Gate,
    Pool,
    Up,
    PairMean,
    Concat(RprIds),
    Scatter(ViewScatter),
    AddSelf,
}

impl Network for Prim {
    fn forward<E: Exec>(&self, e: &mut E, x: &E::Val) -> Result<E::Val> {
        match self {
            Prim::Redist(p) => e.redistribute(x, *p),
            Prim::Sign(a) => e.sign(x, *a),
            Prim::BinConv(w, s) => e.bin_conv(x, *w, *s),
            Prim::FpConv(w, b, s) => e.fp_conv(x, *w, *b, *s),
            Prim::Bn(p) => e.batch_norm(x, *p),
            Prim::Rprelu(p) => e.rprelu(x, *p),
            Prim::Gate => {
                let g = e.global_avg_pool(x)?;
                let s = e.sigmoid(&g)?;
                e.scale_channels(x, &s)
            }
            Prim::Pool => e.avg_pool2(x),
            Prim::Up => e.upsample2(x),
            Prim::PairMean => e.channel_pair_mean(x),
            Prim::Concat(p) => {
                let r = e.rprelu(x, *p)?;
                e.concat_channels(x, &r)
            }
            Prim::Scatter(s) => e.scatter_views(x, s),
            Prim::AddSelf => e.add(x, x),
        }
    }
}

use crate::params::ParamId;

fn check(net: &impl Network, store: &ParamStore, mode: Mode, x: &Batch) -> GradCheckReport {
    let r = finite_diff_check(net, store, mode, x, 1e-4, 99).unwrap();
    assert!(r.checked > 0);
    assert!(r.skipped_kinks * 20 <= r.checked, "{r:?}");
    r
}

#[test]
fn rprelu_above_threshold_gradients() {
    let mut s = ParamStore::new();
    let p = RprIds::register(&mut s, "a", 2).unwrap();
    let x = vec![Tensor::from_fn(&[2, 3, 2], |i| 0.5 + i as f64).unwrap()];
    let (tape, out) = forward_record(&Prim::Rprelu(p), &s, Mode::INFERENCE, x).unwrap();
    let ones = vec![Tensor::full(&[2, 3, 2], 1.0).unwrap()];
    let g = tape.backward(out, ones).unwrap();
    assert_eq!(g.params[&p.beta].data(), &[0.0, 0.0]);
    assert_eq!(g.params[&p.zeta].data(), &[6.0, 6.0]);
    assert_eq!(g.params[&p.gamma].data(), &[-6.0, -6.0]);
    assert_eq!(g.inputs[0][0], Tensor::full(&[2, 3, 2], 1.0).unwrap());
}

#[test]
fn redistribute_gradients() {
    let mut s = ParamStore::new();
    let p = RedistIds::register(&mut s, "r", 2).unwrap();
    let x = batch(&mut rng_from_seed(1), 1, &[2, 3, 4], -1.0, 1.0);
    let (tape, out) = forward_record(&Prim::Redist(p), &s, Mode::INFERENCE, x.clone()).unwrap();
    let g = tape.backward(out, vec![Tensor::full(&[2, 3, 4], 1.0).unwrap()]).unwrap();
    for c in 0..2 {
        let sum: f64 = x[0].data()[c * 12..(c + 1) * 12].iter().sum();
        assert!((g.params[&p.k].data()[c] - sum).abs() < 1e-14);
        assert_eq!(g.params[&p.b].data()[c], 12.0);
    }
}

#[test]
fn single_bitconv_matches_kernel() {
    let mut s = ParamStore::new();
    let mut rng = rng_from_seed(2);
    let slot = ConvSlot::register(&mut s, &mut rng, "c", Precision::Binary, 5, 3, ConvSpec::same(3, 2), 1.0).unwrap();
    let x: Batch = batch(&mut rng, 2, &[5, 7, 6], -1.0, 1.0)
        .into_iter()
        .map(|t| t.map(crate::binarize::sign))
        .collect();
    let net = Prim::BinConv(slot.weight(), slot.spec());
    let (tape, out) = forward_record(&net, &s, Mode::INFERENCE, x.clone()).unwrap();
    let g = slot.spec().geometry(5, 3, 7, 6).unwrap();
    for (y, xx) in tape.value(out).unwrap().iter().zip(&x) {
        let want = conv2d_bit(&pack_activation(xx).unwrap(), s.binary(slot.weight()).unwrap(), &g).unwrap();
        assert_eq!(*y, want);
    }
}

#[test]
fn recorded_forward_is_bitwise_eager() {
    let mut s = ParamStore::new();
    let mut rng = rng_from_seed(3);
    let units: Vec<BdcUnit> = (0..10)
        .map(|i| {
            let v = Variant::ALL[i % 4];
            BdcUnit::register(&mut s, &mut rng, &format!("u{i}"), BdcUnitConfig::new(v, i % 3, 6), Precision::Binary)
                .unwrap()
        })
        .collect();
    struct Stack(Vec<BdcUnit>);
    impl Network for Stack {
        fn forward<E: Exec>(&self, e: &mut E, x: &E::Val) -> Result<E::Val> {
            let mut cur = x.clone();
            for u in &self.0 {
                cur = u.forward(e, &cur)?;
            }
            Ok(cur)
        }
    }
    let net = Stack(units);
    let x = batch(&mut rng, 3, &[6, 5, 5], -2.0, 2.0);
    for mode in [Mode::INFERENCE, Mode::TRAIN, SURROGATE_EVAL, SURROGATE_TRAIN] {
        let plain = net.forward(&mut Eager::new(&s, mode), &x).unwrap();
        let (tape, out) = forward_record(&net, &s, mode, x.clone()).unwrap();
        assert_eq!(tape.value(out).unwrap(), &plain, "{mode:?}");
    }
}

#[test]
fn primitives_pass_gradient_check() {
    let mut s = ParamStore::new();
    let mut rng = rng_from_seed(4);
    let redist = RedistIds::register(&mut s, "r", 3).unwrap();
    let bin = ConvSlot::register(&mut s, &mut rng, "b", Precision::Binary, 3, 4, ConvSpec::same(3, 1), 1.0).unwrap();
    let bin2 = ConvSlot::register(&mut s, &mut rng, "b2", Precision::Binary, 3, 2, ConvSpec::same(3, 2), 1.0).unwrap();
    let fp = ConvSlot::register(&mut s, &mut rng, "f", Precision::Full, 3, 2, ConvSpec::same(3, 2), 1.0).unwrap();
    let bias = s.add_dense("f.bias", Tensor::new(&[2], vec![0.1, -0.2]).unwrap()).unwrap();
    let bn = BnIds::register(&mut s, "bn", 3).unwrap();
    let act = RprIds::register(&mut s, "act", 3).unwrap();
    perturb_all(&mut s, &mut rng, 0.2);

    let x = batch(&mut rng, 2, &[3, 4, 4], -1.5, 1.5);
    let nets: Vec<(&str, Prim, f64)> = vec![
        ("redistribute", Prim::Redist(redist), 1e-6),
        ("sign", Prim::Sign(1.3), 1e-6),
        ("binary conv", Prim::BinConv(bin.weight(), bin.spec()), 1e-6),
        ("binary conv stride 2", Prim::BinConv(bin2.weight(), bin2.spec()), 1e-6),
        ("fp conv", Prim::FpConv(fp.weight(), Some(bias), fp.spec()), 1e-9),
        ("batch norm", Prim::Bn(bn), 1e-6),
        ("gate", Prim::Gate, 1e-6),
        ("pool", Prim::Pool, 1e-6),
        ("upsample", Prim::Up, 1e-6),
        ("concat", Prim::Concat(act), 1e-6),
        ("add", Prim::AddSelf, 1e-6),
    ];
    for (name, net, tol) in &nets {
        for mode in [SURROGATE_EVAL, SURROGATE_TRAIN] {
            let r = check(net, &s, mode, &x);
            assert!(r.max_rel_error < *tol, "{name} {mode:?}: {r:?}");
        }
    }
    let x4 = batch(&mut rng, 2, &[4, 2, 3], -1.0, 1.0);
    let r = check(&Prim::PairMean, &s, SURROGATE_EVAL, &x4);
    assert!(r.max_rel_error < 1e-9, "{r:?}");
}

#[test]
fn rprelu_away_from_kink() {
    let mut s = ParamStore::new();
    let mut rng = rng_from_seed(5);
    let act = RprIds::register(&mut s, "act", 3).unwrap();
    perturb_all(&mut s, &mut rng, 0.2);
    let gamma = s.data(act.gamma).to_vec();
    let x: Batch = (0..2)
        .map(|_| {
            Tensor::from_fn(&[3, 3, 3], |i| {
                let off = rng.random_range(0.1..1.0);
                gamma[i / 9] + if rng.random_bool(0.5) { off } else { -off }
            })
            .unwrap()
        })
        .collect();
    let r = check(&Prim::Rprelu(act), &s, SURROGATE_EVAL, &x);
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn scatter_gradient_check() {
    let mut rng = rng_from_seed(6);
    let taps = (0..2)
        .map(|_| {
            (0..6)
                .map(|_| (0..2).map(|_| (rng.random_range(0..4), rng.random_range(0.1..1.0))).collect())
                .collect()
        })
        .collect();
    let sc = ViewScatter {
        in_dims: [2, 2, 2],
        out_hw: [2, 3],
        taps,
    };
    let s = ParamStore::new();
    let x = batch(&mut rng, 4, &[2, 2, 2], -1.0, 1.0);
    let r = check(&Prim::Scatter(sc), &s, SURROGATE_EVAL, &x);
    assert!(r.max_rel_error < 1e-9, "{r:?}");
}

#[test]
fn bdc_units_pass_gradient_check() {
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        for first in [3, 1] {
            let mut s = ParamStore::new();
            let mut rng = rng_from_seed(10 + i as u64);
            let cfg = BdcUnitConfig::new(v, 2, 3).with_kernels(first, 3 - first + 1);
            let unit = BdcUnit::register(&mut s, &mut rng, "u", cfg, Precision::Binary).unwrap();
            perturb_all(&mut s, &mut rng, 0.1);
            let x = batch(&mut rng, 2, &[3, 4, 4], -1.5, 1.5);
            for mode in [SURROGATE_EVAL, SURROGATE_TRAIN] {
                let r = check(&unit, &s, mode, &x);
                assert!(r.max_rel_error < 1e-3, "{v} k{first} {mode:?}: {r:?}");
            }
        }
    }
}

#[test]
fn modules_pass_gradient_check() {
    for kind in [ModuleKind::DownSample, ModuleKind::UpSample, ModuleKind::ChannelReduce] {
        let mut s = ParamStore::new();
        let mut rng = rng_from_seed(20);
        let cfg = BdcUnitConfig::new(Variant::V3, 1, 2);
        let m = ConvModule::register(&mut s, &mut rng, "m", kind, &cfg, Precision::Binary).unwrap();
        perturb_all(&mut s, &mut rng, 0.1);
        let x = batch(&mut rng, 2, &[2, 4, 4], -1.5, 1.5);
        let r = check(&m, &s, SURROGATE_TRAIN, &x);
        assert!(r.max_rel_error < 1e-3, "{kind:?}: {r:?}");
    }
}

#[test]
fn hard_and_surrogate_backward_agree_on_sign() {
    let mut s = ParamStore::new();
    let p = RedistIds::register(&mut s, "r", 2).unwrap();
    struct RedistSign(RedistIds);
    impl Network for RedistSign {
        fn forward<E: Exec>(&self, e: &mut E, x: &E::Val) -> Result<E::Val> {
            let r = e.redistribute(x, self.0)?;
            e.sign(&r, 2.0)
        }
    }
    let mut rng = rng_from_seed(7);
    let x = batch(&mut rng, 2, &[2, 3, 3], -1.0, 1.0);
    let dy = batch(&mut rng, 2, &[2, 3, 3], -1.0, 1.0);
    let net = RedistSign(p);
    let (th, oh) = forward_record(&net, &s, Mode::INFERENCE, x.clone()).unwrap();
    let (ts, os) = forward_record(&net, &s, SURROGATE_EVAL, x).unwrap();
    assert_ne!(th.value(oh).unwrap(), ts.value(os).unwrap());
    assert_eq!(th.backward(oh, dy.clone()).unwrap(), ts.backward(os, dy).unwrap());
}

#[test]
fn gradient_keys_are_trainable_set() {
    let mut s = ParamStore::new();
    let mut rng = rng_from_seed(8);
    let unit = BdcUnit::register(&mut s, &mut rng, "u", BdcUnitConfig::new(Variant::V3, 2, 4), Precision::Binary)
        .unwrap();
    let x = batch(&mut rng, 2, &[4, 3, 3], -1.0, 1.0);
    let (tape, out) = forward_record(&unit, &s, Mode::TRAIN, x.clone()).unwrap();
    let g = tape.backward(out, x).unwrap();
    let keys: Vec<_> = g.params.keys().copied().collect();
    assert_eq!(keys, s.trainable_ids());
    assert!(g.params.values().all(|t| t.all_finite()));
}

#[test]
fn mismatched_upstream_rejected() {
    let s = ParamStore::new();
    let (tape, out) = forward_record(&Prim::Pool, &s, Mode::INFERENCE, vec![Tensor::zeros(&[1, 2, 2]).unwrap()]).unwrap();
    assert!(tape.backward(out, vec![Tensor::zeros(&[1, 2, 2]).unwrap()]).is_err());
    assert!(tape.backward(out, vec![]).is_err());
}

#[test]
fn training_steps_are_deterministic() {
    let run = || {
        let mut s = ParamStore::new();
        let mut rng = rng_from_seed(9);
        let unit =
            BdcUnit::register(&mut s, &mut rng, "u", BdcUnitConfig::new(Variant::V2, 2, 3), Precision::Binary).unwrap();
        let mut opt = OptimState::new(AdamWConfig {
            lr: 1e-2,
            ..Default::default()
        });
        let x = batch(&mut rng, 3, &[3, 4, 4], -1.0, 1.0);
        let mut all = Vec::new();
        for _ in 0..5 {
            let (tape, out) = forward_record(&unit, &s, Mode::TRAIN, x.clone()).unwrap();
            let g = tape.backward(out, x.clone()).unwrap();
            let updates = tape.into_bn_updates();
            apply_bn_updates(&mut s, &updates).unwrap();
            adamw_step(&mut s, &g.params, &mut opt).unwrap();
            all.push(g);
        }
        (s, all)
    };
    let (s1, g1) = run();
    let (s2, g2) = run();
    assert_eq!(g1, g2);
    assert_eq!(s1, s2);
}

#[test]
fn bn_updates_follow_momentum() {
    let mut s = ParamStore::new();
    let p = BnIds::register(&mut s, "bn", 1).unwrap();
    let x = vec![
        Tensor::new(&[1, 1, 2], vec![1.0, 3.0]).unwrap(),
        Tensor::new(&[1, 1, 2], vec![5.0, 7.0]).unwrap(),
    ];
    let (tape, _) = forward_record(&Prim::Bn(p), &s, Mode::TRAIN, x).unwrap();
    let u = tape.into_bn_updates();
    apply_bn_updates(&mut s, &u).unwrap();
    assert!((s.data(p.running_mean)[0] - 0.4).abs() < 1e-15);
    assert!((s.data(p.running_var)[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-15);
}
