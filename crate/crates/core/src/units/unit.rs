//! BDC units: the binarized conv path in its four variants, MulBiconv
//! stacks and the per-channel weight branch.

use rand::Rng as _;

use crate::analysis::cost::LayerDesc;
use crate::binarize::{redistribute, sign_forward, BinaryConvParams, RedistParams};
use crate::bitconv::{conv2d_bit, pack_activation};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::exec::{Network, ConvSpec, Eager, Exec};
use super::layers::{self, BnIds, RPReLUParams, RedistIds, RprIds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    V0,
    V1,
    V2,
    V3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::V0, Variant::V1, Variant::V2, Variant::V3];

    pub fn name(self) -> &'static str {
        match self {
            Variant::V0 => "V0",
            Variant::V1 => "V1",
            Variant::V2 => "V2",
            Variant::V3 => "V3",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "V0" => Ok(Variant::V0),
            "V1" => Ok(Variant::V1),
            "V2" => Ok(Variant::V2),
            "V3" => Ok(Variant::V3),
            _ => Err(Error::InvalidArgument(format!("unknown variant {s:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether the convs of a path run on packed bits or in full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Binary,
    Full,
}

/// Default surrogate steepness of the sign function.
pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BdcUnitConfig {
    pub variant: Variant,
    /// MulBiconv depth `N` (V2 and V3 only).
    pub n_mulbiconv: usize,
    /// Input channel count.
    pub channels: usize,
    pub first_kernel: usize,
    /// Kernel of the second conv (V1 and later).
    pub second_kernel: usize,
    /// Steepness of the tanh used for the sign gradient.
    pub alpha: f64,
}

impl BdcUnitConfig {
    pub fn new(variant: Variant, n_mulbiconv: usize, channels: usize) -> Self {
        Self {
            variant,
            n_mulbiconv,
            channels,
            first_kernel: 3,
            second_kernel: 1,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn with_kernels(mut self, first: usize, second: usize) -> Self {
        self.first_kernel = first;
        self.second_kernel = second;
        self
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidArgument("unit with zero channels".into()));
        }
        for k in [self.first_kernel, self.second_kernel] {
            if k != 1 && k != 3 {
                return Err(Error::InvalidKernel(k));
            }
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::NonPositiveAlpha(self.alpha));
        }
        Ok(())
    }

    /// `N` as actually used by the variant.
    pub fn effective_n(&self) -> usize {
        match self.variant {
            Variant::V2 | Variant::V3 => self.n_mulbiconv,
            Variant::V0 | Variant::V1 => 0,
        }
    }
}

/// Latent init: uniform in `±min(1/sqrt(fan_in), 0.9)`.
pub(crate) fn init_weights(rng: &mut Rng, dims: &[usize]) -> Result<Tensor> {
    let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
    let bound = (1.0 / fan_in.sqrt()).min(0.9);
    Tensor::from_fn(dims, |_| rng.random_range(-bound..bound))
}

/// One convolution position of a path: either redistribute, sign and a
/// packed conv, or a plain full-precision conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvSlot {
    Binary {
        redist: RedistIds,
        weight: ParamId,
        spec: ConvSpec,
    },
    Full {
        weight: ParamId,
        spec: ConvSpec,
    },
}

impl ConvSlot {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        precision: Precision,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        alpha: f64,
    ) -> Result<Self> {
        let w = init_weights(rng, &[c_out, c_in, spec.kernel, spec.kernel])?;
        Ok(match precision {
            Precision::Binary => ConvSlot::Binary {
                redist: RedistIds::register(store, &format!("{prefix}.redist"), c_in)?,
                weight: store.add_binary(&format!("{prefix}.weight"), BinaryConvParams::new(w, alpha)?)?,
                spec,
            },
            Precision::Full => ConvSlot::Full {
                weight: store.add_dense(&format!("{prefix}.weight"), w)?,
                spec,
            },
        })
    }

    pub fn forward<E: Exec>(&self, e: &mut E, x: &E::Val) -> Result<E::Val> {
        match *self {
            ConvSlot::Binary { redist, weight, spec } => {
                let alpha = e.store().expect_binary(weight)?.alpha();
                let r = e.redistribute(x, redist)?;
                let s = e.sign(&r, alpha)?;
                e.bin_conv(&s, weight, spec)
            }
            ConvSlot::Full { weight, spec } => e.fp_conv(x, weight, None, spec),
        }
    }

    pub fn weight(&self) -> ParamId {
        match *self {
            ConvSlot::Binary { weight, .. } | ConvSlot::Full { weight, .. } => weight,
        }
    }

    pub fn spec(&self) -> ConvSpec {
        match *self {
            ConvSlot::Binary { spec, .. } | ConvSlot::Full { spec, .. } => spec,
        }
    }

    /// Cost entries for an input of `dims`; returns them with the output dims.
    pub fn describe(&self, store: &ParamStore, dims: [usize; 3]) -> Result<(Vec<LayerDesc>, [usize; 3])> {
        let g = self.spec().geometry_for(&dims, store.tensor(self.weight()).dims())?;
        let mut out = Vec::new();
        if let ConvSlot::Binary { .. } = self {
            out.push(LayerDesc::Elementwise { params: 2 * dims[0] as u64 });
        }
        out.push(LayerDesc::Conv {
            geometry: g,
            binarized: matches!(self, ConvSlot::Binary { .. }),
        });
        Ok((out, g.output_dims()))
    }
}

/// `N` repetitions of `RPReLU -> conv slot (1x1, C -> C)`, no batch norm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MulBiconv {
    pub stages: Vec<(RprIds, ConvSlot)>,
}

impl MulBiconv {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        precision: Precision,
        c: usize,
        n: usize,
        alpha: f64,
    ) -> Result<Self> {
        let stages = (0..n)
            .map(|i| {
                let p = format!("{prefix}.{i}");
                Ok((
                    RprIds::register(store, &format!("{p}.act"), c)?,
                    ConvSlot::register(store, rng, &format!("{p}.conv"), precision, c, c, ConvSpec::same(1, 1), alpha)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn forward<E: Exec>(&self, e: &mut E, x: &E::Val) -> Result<E::Val> {
        let mut cur = x.clone();
        for (act, conv) in &self.stages {
            let a = e.rprelu(&cur, *act)?;
            cur = conv.forward(e, &a)?;
        }
        Ok(cur)
    }

    pub fn describe(&self, store: &ParamStore, dims: [usize; 3]) -> Result<Vec<LayerDesc>> {
        let mut out = Vec::new();
        for (_, conv) in &self.stages {
            out.push(LayerDesc::Elementwise { params: 3 * dims[0] as u64 });
            out.extend(conv.describe(store, dims)?.0);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PathTail {
    slot: ConvSlot,
    bn: BnIds,
    act: RprIds,
    mul: MulBiconv,
}

/// The conv path of a unit, `C_in -> C_out` with an optional stride on the
/// first conv. The residual is added by the caller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BdcPath {
    variant: Variant,
    slot_a: ConvSlot,
    bn_a: BnIds,
    act_a: RprIds,
    tail: Option<PathTail>,
}

impl BdcPath {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        cfg: &BdcUnitConfig,
        precision: Precision,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let c_in = cfg.channels;
        let slot_a = ConvSlot::register(
            store,
            rng,
            &format!("{prefix}.conv_a"),
            precision,
            c_in,
            c_out,
            ConvSpec::same(cfg.first_kernel, stride),
            cfg.alpha,
        )?;
        let bn_a = BnIds::register(store, &format!("{prefix}.bn_a"), c_out)?;
        let act_a = RprIds::register(store, &format!("{prefix}.act_a"), c_out)?;
        let tail = if cfg.variant == Variant::V0 {
            None
        } else {
            let slot = ConvSlot::register(
                store,
                rng,
                &format!("{prefix}.conv_b"),
                precision,
                c_out,
                c_out,
                ConvSpec::same(cfg.second_kernel, 1),
                cfg.alpha,
            )?;
            let bn = BnIds::register(store, &format!("{prefix}.bn_b"), c_out)?;
            let act = RprIds::register(store, &format!("{prefix}.act_b"), c_out)?;
            let mul = MulBiconv::register(
                store,
                rng,
                &format!("{prefix}.mul"),
                precision,
                c_out,
                cfg.effective_n(),
                cfg.alpha,
            )?;
            Some(PathTail { slot, bn, act, mul })
        };
        Ok(Self {
            variant: cfg.variant,
            slot_a,
            bn_a,
            act_a,
            tail,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn mulbiconv(&self) -> Option<&MulBiconv> {
        self.tail.as_ref().map(|t| &t.mul)
    }

    pub fn forward<E: Exec>(&self, e: &mut E, x: &E::Val) -> Result<E::Val> {
        let ya = self.slot_a.forward(e, x)?;
        let a = e.batch_norm(&ya, self.bn_a)?;
        let b = e.rprelu(&a, self.act_a)?;
        let Some(t) = &self.tail else {
            return Ok(b);
        };
        let yb = t.slot.forward(e, &b)?;
        let c = e.batch_norm(&yb, t.bn)?;
        match self.variant {
            Variant::V0 | Variant::V1 => e.rprelu(&c, t.act),
            Variant::V2 => {
                let m = t.mul.forward(e, &c)?;
                e.rprelu(&m, t.act)
            }
            Variant::V3 => {
                let x1 = e.rprelu(&c, t.act)?;
                let pooled = e.global_avg_pool(&x1)?;
                let logits = t.mul.forward(e, &pooled)?;
                let gate = e.sigmoid(&logits)?;
                e.scale_channels(&x1, &gate)
            }
        }
    }

    /// Cost entries for an input of `dims`, and the output dims.
    pub fn describe(&self, store: &ParamStore, dims: [usize; 3]) -> Result<(Vec<LayerDesc>, [usize; 3])> {
        let (mut out, d) = self.slot_a.describe(store, dims)?;
        let bn_act = LayerDesc::Elementwise { params: 5 * d[0] as u64 };
        out.push(bn_act);
        let Some(t) = &self.tail else {
            return Ok((out, d));
        };
        let (layers_b, d) = t.slot.describe(store, d)?;
        out.extend(layers_b);
        out.push(bn_act);
        match self.variant {
            Variant::V2 => out.extend(t.mul.describe(store, d)?),
            Variant::V3 => out.extend(t.mul.describe(store, [d[0], 1, 1])?),
            Variant::V0 | Variant::V1 => {}
        }
        Ok((out, d))
    }
}

/// A shape-preserving unit: `x + path(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BdcUnit {
    pub cfg: BdcUnitConfig,
    pub path: BdcPath,
}

impl BdcUnit {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        cfg: BdcUnitConfig,
        precision: Precision,
    ) -> Result<Self> {
        let path = BdcPath::register(store, rng, prefix, &cfg, precision, cfg.channels, 1)?;
        Ok(Self { cfg, path })
    }

    pub fn forward<E: Exec>(&self, e: &mut E, x: &E::Val) -> Result<E::Val> {
        let d = e.dims(x)?;
        if d.len() != 3 || d[0] != self.cfg.channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cfg.channels],
                got: d,
            });
        }
        let p = self.path.forward(e, x)?;
        e.add(x, &p)
    }
}

/// Inference-mode forward of one sample through a unit.
pub fn bdc_forward(x: &Tensor, unit: &BdcUnit, store: &ParamStore) -> Result<Tensor> {
    let mut e = Eager::inference(store);
    let mut y = unit.forward(&mut e, &vec![x.clone()])?;
    Ok(y.pop().expect("one sample in, one out"))
}

/// Borrowed parameters of one MulBiconv stage.
#[derive(Debug, Clone, Copy)]
pub struct MulBiconvStage<'a> {
    pub rprelu: RPReLUParams<'a>,
    pub redist: RedistParams<'a>,
    pub conv: &'a BinaryConvParams,
}

impl<'a> MulBiconvStage<'a> {
    /// Views a binarized stage of a registered stack.
    pub fn from_store(store: &'a ParamStore, act: RprIds, slot: ConvSlot) -> Result<Self> {
        let ConvSlot::Binary { redist, weight, .. } = slot else {
            return Err(Error::InvalidArgument("MulBiconv stage is not binarized".into()));
        };
        Ok(Self {
            rprelu: act.view(store),
            redist: RedistParams {
                k: store.data(redist.k),
                b: store.data(redist.b),
            },
            conv: store.expect_binary(weight)?,
        })
    }
}

/// Applies `n` stages of `RPReLU -> redistribute -> sign -> 1x1 bitconv`.
pub fn mulbiconv(x: &Tensor, stack: &[MulBiconvStage<'_>], n: usize) -> Result<Tensor> {
    if stack.len() != n {
        return Err(Error::StackLengthMismatch { stack: stack.len(), n });
    }
    let mut cur = x.clone();
    for st in stack {
        let (co, ci, k) = st.conv.dims();
        if k != 1 {
            return Err(Error::KernelNotOne(k));
        }
        let (_, h, w) = cur.chw()?;
        let g = ConvSpec::same(1, 1).geometry(ci, co, h, w)?;
        let a = layers::rprelu(&cur, st.rprelu)?;
        let s = sign_forward(&redistribute(&a, st.redist)?);
        cur = conv2d_bit(&pack_activation(&s)?, st.conv, &g)?;
    }
    Ok(cur)
}

/// `sigmoid(MulBiconv_n(GAP(x1))) * x1`, broadcast over space.
pub fn channel_weight_branch(x1: &Tensor, stack: &[MulBiconvStage<'_>], n: usize) -> Result<Tensor> {
    let pooled = layers::global_avg_pool(x1)?;
    let logits = mulbiconv(&pooled, stack, n)?;
    layers::scale_channels(x1, &layers::sigmoid(&logits))
}

impl Network for MulBiconv {
    fn forward<E: Exec>(&self, e: &mut E, x: &E::Val) -> Result<E::Val> {
        MulBiconv::forward(self, e, x)
    }
}

impl Network for BdcUnit {
    fn forward<E: Exec>(&self, e: &mut E, x: &E::Val) -> Result<E::Val> {
        BdcUnit::forward(self, e, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::units::exec::{BnMode, Mode, SignMode};

    fn random_input(rng: &mut Rng, dims: &[usize]) -> Tensor {
        Tensor::from_fn(dims, |_| rng.random_range(-2.0..2.0)).unwrap()
    }

    fn build(cfg: BdcUnitConfig, seed: u64) -> (ParamStore, BdcUnit) {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(seed);
        let unit = BdcUnit::register(&mut store, &mut rng, "u", cfg, Precision::Binary).unwrap();
        (store, unit)
    }

    fn stages<'a>(store: &'a ParamStore, m: &MulBiconv) -> Vec<MulBiconvStage<'a>> {
        m.stages
            .iter()
            .map(|(a, s)| MulBiconvStage::from_store(store, *a, *s).unwrap())
            .collect()
    }

    fn set_all(store: &mut ParamStore, suffix: &str, v: f64) {
        let ids: Vec<_> = store
            .entries()
            .filter(|(_, e)| e.name.ends_with(suffix))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|x| *x = v);
        }
    }

    fn zero_scales(store: &mut ParamStore) {
        let ids: Vec<_> = store.entries().map(|(id, _)| id).collect();
        for id in ids {
            if let Some(b) = store.binary_mut(id) {
                b.set_scale(0.0);
            }
        }
    }

    #[test]
    fn mulbiconv_zero_is_identity() {
        let x = Tensor::new(&[2, 1, 1], vec![0.3, -1.2]).unwrap();
        assert_eq!(mulbiconv(&x, &[], 0).unwrap(), x);
    }

    #[test]
    fn mulbiconv_single_scalar_stage() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(3);
        let m = MulBiconv::register(&mut store, &mut rng, "m", Precision::Binary, 1, 1, 1.0).unwrap();
        let (act, slot) = m.stages[0];
        let ConvSlot::Binary { redist, .. } = slot else { unreachable!() };
        store.tensor_mut(redist.k).data_mut()[0] = -2.0;
        store.tensor_mut(redist.b).data_mut()[0] = 0.1;
        store.tensor_mut(act.gamma).data_mut()[0] = 0.2;
        let st = stages(&store, &m);
        for v in [-1.5, -0.1, 0.0, 0.15, 0.3, 2.0] {
            let x = Tensor::new(&[1, 1, 1], vec![v]).unwrap();
            let y = mulbiconv(&x, &st, 1).unwrap();
            let r = if v > 0.2 { v - 0.2 } else { 0.25 * (v - 0.2) };
            let pre = -2.0 * r + 0.1;
            let wsign = if st[0].conv.latent().data()[0] > 0.0 { 1.0 } else { -1.0 };
            let xs = if pre > 0.0 { 1.0 } else { -1.0 };
            assert_eq!(y.data()[0], st[0].conv.scale() * wsign * xs, "v = {v}");
        }
    }

    #[test]
    fn mulbiconv_composes() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(8);
        let m = MulBiconv::register(&mut store, &mut rng, "m", Precision::Binary, 5, 3, 1.0).unwrap();
        let st = stages(&store, &m);
        let x = random_input(&mut rng, &[5, 3, 2]);
        let whole = mulbiconv(&x, &st, 3).unwrap();
        let split = mulbiconv(&mulbiconv(&x, &st[..1], 1).unwrap(), &st[1..], 2).unwrap();
        assert_eq!(whole, split);
        assert!(matches!(
            mulbiconv(&x, &st, 2),
            Err(Error::StackLengthMismatch { stack: 3, n: 2 })
        ));
    }

    #[test]
    fn mulbiconv_rejects_wide_kernel() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(1);
        let s = ConvSlot::register(&mut store, &mut rng, "c", Precision::Binary, 2, 2, ConvSpec::same(3, 1), 1.0)
            .unwrap();
        let a = RprIds::register(&mut store, "a", 2).unwrap();
        let st = MulBiconvStage::from_store(&store, a, s).unwrap();
        let x = Tensor::zeros(&[2, 3, 3]).unwrap();
        assert!(matches!(mulbiconv(&x, &[st], 1), Err(Error::KernelNotOne(3))));
    }

    #[test]
    fn registered_stack_matches_free_function() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(21);
        let m = MulBiconv::register(&mut store, &mut rng, "m", Precision::Binary, 7, 2, 1.0).unwrap();
        let x = random_input(&mut rng, &[7, 4, 4]);
        let mut e = Eager::inference(&store);
        let y = m.forward(&mut e, &vec![x.clone()]).unwrap();
        assert_eq!(y[0], mulbiconv(&x, &stages(&store, &m), 2).unwrap());
    }

    #[test]
    fn weight_branch_zero_logits_halves() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(2);
        let m = MulBiconv::register(&mut store, &mut rng, "m", Precision::Binary, 3, 1, 1.0).unwrap();
        zero_scales(&mut store);
        let x = random_input(&mut rng, &[3, 4, 4]);
        let st = stages(&store, &m);
        assert_eq!(channel_weight_branch(&x, &st, 1).unwrap(), x.scale(0.5));
        let z = Tensor::zeros(&[3, 4, 4]).unwrap();
        assert_eq!(channel_weight_branch(&z, &st, 1).unwrap(), z);
    }

    #[test]
    fn weight_branch_matches_hand_composition() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(5);
        let m = MulBiconv::register(&mut store, &mut rng, "m", Precision::Binary, 4, 2, 1.0).unwrap();
        let st = stages(&store, &m);
        let x = random_input(&mut rng, &[4, 3, 5]);
        let mut means = vec![0.0; 4];
        for (c, ch) in x.data().chunks(15).enumerate() {
            means[c] = ch.iter().sum::<f64>() / 15.0;
        }
        let logits = mulbiconv(&Tensor::new(&[4, 1, 1], means).unwrap(), &st, 2).unwrap();
        let expect = Tensor::from_fn(&[4, 3, 5], |i| {
            x.data()[i] / (1.0 + (-logits.data()[i / 15]).exp())
        })
        .unwrap();
        let got = channel_weight_branch(&x, &st, 2).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-15);
        assert!(layers::sigmoid(&logits).data().iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn zero_branch_gives_identity() {
        for v in [Variant::V0, Variant::V1] {
            let (mut store, unit) = build(BdcUnitConfig::new(v, 0, 6), 4);
            zero_scales(&mut store);
            set_all(&mut store, ".beta", 1.0);
            let x = random_input(&mut rng_from_seed(9), &[6, 5, 5]);
            assert_eq!(bdc_forward(&x, &unit, &store).unwrap(), x, "{v}");
        }
    }

    #[test]
    fn residual_offset_is_spatially_constant() {
        for v in Variant::ALL {
            let (mut store, unit) = build(BdcUnitConfig::new(v, 2, 3), 11);
            zero_scales(&mut store);
            set_all(&mut store, ".beta", 1.0);
            set_all(&mut store, ".zeta", 0.3);
            let x = random_input(&mut rng_from_seed(1), &[3, 4, 4]);
            let y = bdc_forward(&x, &unit, &store).unwrap();
            let d = y.zip_map(&x, |a, b| a - b).unwrap();
            for ch in d.data().chunks(16) {
                assert!(ch.iter().all(|&v| (v - ch[0]).abs() < 1e-12), "{v}");
            }
        }
    }

    #[test]
    fn v3_gate_on_single_pixel() {
        let (mut store, unit) = build(BdcUnitConfig::new(Variant::V3, 0, 1), 6);
        // Conv outputs are zero, so X1 = RPReLU(BN(0)) = zeta_b and the
        // gate with no learnable stages is sigmoid(zeta_b).
        zero_scales(&mut store);
        set_all(&mut store, "act_b.zeta", 0.7);
        let x = Tensor::new(&[1, 1, 1], vec![-0.4]).unwrap();
        let y = bdc_forward(&x, &unit, &store).unwrap();
        let x1: f64 = 0.7;
        let expect = -0.4 + x1 / (1.0 + (-x1).exp());
        assert!((y.data()[0] - expect).abs() < 1e-15);
        set_all(&mut store, "act_b.zeta", 0.0);
        assert_eq!(bdc_forward(&x, &unit, &store).unwrap(), x);
    }

    #[test]
    fn v2_with_no_stages_equals_v1() {
        let (store2, u2) = build(BdcUnitConfig::new(Variant::V2, 0, 5), 13);
        let (store1, u1) = build(BdcUnitConfig::new(Variant::V1, 0, 5), 13);
        assert_eq!(store1, store2);
        let x = random_input(&mut rng_from_seed(2), &[5, 6, 6]);
        for mode in [Mode::INFERENCE, Mode::TRAIN] {
            let batch = vec![x.clone(), x.scale(-0.5)];
            let y1 = u1.forward(&mut Eager::new(&store1, mode), &batch).unwrap();
            let y2 = u2.forward(&mut Eager::new(&store2, mode), &batch).unwrap();
            assert_eq!(y1, y2);
        }
    }

    #[test]
    fn shapes_preserved_for_random_configs() {
        let mut rng = rng_from_seed(77);
        for i in 0..200 {
            let v = Variant::ALL[rng.random_range(0..4)];
            let c = rng.random_range(1..6);
            let cfg = BdcUnitConfig::new(v, rng.random_range(0..3), c)
                .with_kernels([1, 3][rng.random_range(0..2)], [1, 3][rng.random_range(0..2)]);
            let (store, unit) = build(cfg, i);
            let dims = [c, rng.random_range(1..5), rng.random_range(1..5)];
            let x = random_input(&mut rng, &dims);
            assert_eq!(bdc_forward(&x, &unit, &store).unwrap().dims(), dims);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let (store, unit) = build(BdcUnitConfig::new(Variant::V1, 0, 4), 0);
        let x = Tensor::zeros(&[3, 2, 2]).unwrap();
        assert!(matches!(bdc_forward(&x, &unit, &store), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn surrogate_mode_is_smooth_version() {
        let (store, unit) = build(BdcUnitConfig::new(Variant::V3, 2, 4), 17);
        let x = random_input(&mut rng_from_seed(4), &[4, 3, 3]);
        let mode = Mode {
            sign: SignMode::Surrogate,
            bn: BnMode::Eval,
        };
        let y = unit.forward(&mut Eager::new(&store, mode), &vec![x.clone()]).unwrap();
        let h = bdc_forward(&x, &unit, &store).unwrap();
        assert!(y[0].all_finite());
        assert_ne!(y[0], h);
    }
}
