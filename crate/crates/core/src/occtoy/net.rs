//! The toy occupancy network: image encoder, fixed view scatter, BEV
//! encoder and a channel-to-height head.

use crate::analysis::cost::{LayerDesc, Layout};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use crate::units::exec::{ConvSpec, Eager, Exec, Mode, Network};
use crate::units::layers::{BnIds, RprIds, ViewScatter};
use crate::units::module::{ConvModule, ModuleKind};
use crate::units::unit::{init_weights, BdcUnitConfig, Precision, Variant};

use super::scene::{LabelTensor, ViewDir, VIEWS};

/// Which stages are binarized. `Base` covers the BEV encoder and the head;
/// `Tiny` adds the second image-encoder module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Base,
    Tiny,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Scope::Base),
            "tiny" => Ok(Scope::Tiny),
            _ => Err(Error::InvalidArgument(format!("unknown scope {s:?} (base or tiny)"))),
        }
    }
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scope::Base => "base",
            Scope::Tiny => "tiny",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetSpec {
    /// Voxel grid `(X, Y, Z)`.
    pub grid: [usize; 3],
    pub n_class: usize,
    /// Depth render size `(H, W)`.
    pub image: [usize; 2],
    /// Channels after the stem; the image encoder doubles them twice.
    pub stem_channels: usize,
    /// Variant, `N`, kernels and alpha shared by every module. The channel
    /// count is set per stage.
    pub unit: BdcUnitConfig,
    pub scope: Scope,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            grid: [16, 16, 4],
            n_class: 4,
            image: [32, 32],
            stem_channels: 4,
            unit: BdcUnitConfig::new(Variant::V3, 2, 0),
            scope: Scope::Base,
        }
    }
}

impl NetSpec {
    pub fn image_channels(&self) -> usize {
        4 * self.stem_channels
    }

    pub fn bev_channels(&self) -> usize {
        VIEWS.len() * self.image_channels()
    }

    pub fn head_channels(&self) -> usize {
        self.grid[2] * self.n_class
    }

    pub fn validate(&self) -> Result<()> {
        let plan = |msg: String| Err(Error::ChannelPlanMismatch(msg));
        if self.stem_channels == 0 {
            return plan("stem with zero channels".into());
        }
        if self.image.iter().any(|&d| d == 0 || d % 4 != 0) {
            return plan(format!("image {:?} must be a positive multiple of 4", self.image));
        }
        if self.grid.contains(&0) || self.n_class < 2 {
            return plan(format!("{} classes on grid {:?}", self.n_class, self.grid));
        }
        if !self.bev_channels().is_multiple_of(2) {
            return plan(format!("{} BEV channels cannot be halved", self.bev_channels()));
        }
        self.unit.with_channels(1).validate()
    }
}

/// Assembled network. Parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub spec: NetSpec,
    stem_w: ParamId,
    stem_bn: BnIds,
    stem_act: RprIds,
    encoder: [ConvModule; 2],
    scatter: ViewScatter,
    bev: [ConvModule; 2],
    head: ConvModule,
    cls_w: ParamId,
    cls_b: ParamId,
}

/// Overlap length of `[a0, a1)` and `[b0, b1)`.
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Area-weighted taps from `n` feature cells spanning `g` grid cells onto
/// grid cell `i`.
fn axis_taps(i: usize, n: usize, g: usize) -> Vec<(usize, f64)> {
    let step = g as f64 / n as f64;
    let mut taps: Vec<(usize, f64)> = (0..n)
        .map(|j| (j, overlap(i as f64, i as f64 + 1.0, j as f64 * step, (j + 1) as f64 * step)))
        .filter(|&(_, w)| w > 0.0)
        .collect();
    let total: f64 = taps.iter().map(|t| t.1).sum();
    for t in &mut taps {
        t.1 /= total;
    }
    taps
}

/// Each BEV cell averages the image-feature cells that project onto it.
/// The top view covers the ground plane directly; a front-view column
/// covers one `x` slab, and all its rows are averaged.
pub fn bev_scatter(feature: [usize; 3], grid: [usize; 3]) -> ViewScatter {
    let [_, fh, fw] = feature;
    let [gx, gy, _] = grid;
    let taps = VIEWS
        .iter()
        .map(|dir| {
            let mut per_cell = Vec::with_capacity(gx * gy);
            for x in 0..gx {
                for y in 0..gy {
                    let t: Vec<(usize, f64)> = match dir {
                        ViewDir::Top => {
                            let (tx, ty) = (axis_taps(x, fh, gx), axis_taps(y, fw, gy));
                            tx.iter()
                                .flat_map(|&(r, a)| ty.iter().map(move |&(c, b)| (r * fw + c, a * b)))
                                .collect()
                        }
                        ViewDir::Front => axis_taps(x, fw, gx)
                            .into_iter()
                            .flat_map(|(c, a)| (0..fh).map(move |r| (r * fw + c, a / fh as f64)))
                            .collect(),
                    };
                    per_cell.push(t);
                }
            }
            per_cell
        })
        .collect();
    ViewScatter {
        in_dims: feature,
        out_hw: [gx, gy],
        taps,
    }
}

impl ToyNet {
    /// Registers every parameter in `store`, initialized from `seed`.
    pub fn build(spec: &NetSpec, store: &mut ParamStore, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_from_seed(seed);
        let s = spec.stem_channels;
        let stem_w = store.add_dense("stem.conv.weight", init_weights(&mut rng, &[s, 1, 3, 3])?)?;
        let stem_bn = BnIds::register(store, "stem.bn", s)?;
        let stem_act = RprIds::register(store, "stem.act", s)?;
        let neck = match spec.scope {
            Scope::Base => Precision::Full,
            Scope::Tiny => Precision::Binary,
        };
        let mut module = |prefix: &str, kind, c, precision| {
            ConvModule::register(store, &mut rng, prefix, kind, &spec.unit.with_channels(c), precision)
        };
        let encoder = [
            module("encoder.0", ModuleKind::DownSample, s, Precision::Full)?,
            module("encoder.1", ModuleKind::DownSample, 2 * s, neck)?,
        ];
        let bc = spec.bev_channels();
        let bev = [
            module("bev.0", ModuleKind::Basic, bc, Precision::Binary)?,
            module("bev.1", ModuleKind::Basic, bc, Precision::Binary)?,
        ];
        let head = module("head.reduce", ModuleKind::ChannelReduce, bc, Precision::Binary)?;
        let hc = spec.head_channels();
        let cls_w = store.add_dense("head.cls.weight", init_weights(&mut rng, &[hc, bc / 2, 1, 1])?)?;
        let cls_b = store.add_dense("head.cls.bias", Tensor::zeros(&[hc])?)?;
        let [h, w] = spec.image;
        Ok(Self {
            spec: *spec,
            stem_w,
            stem_bn,
            stem_act,
            encoder,
            scatter: bev_scatter([spec.image_channels(), h / 4, w / 4], spec.grid),
            bev,
            head,
            cls_w,
            cls_b,
        })
    }

    pub fn scatter(&self) -> &ViewScatter {
        &self.scatter
    }

    pub fn modules(&self) -> impl Iterator<Item = &ConvModule> {
        self.encoder.iter().chain(&self.bev).chain(std::iter::once(&self.head))
    }

    /// Output dims per scene, `(Z * N_class, X, Y)`.
    pub fn output_dims(&self) -> [usize; 3] {
        [self.spec.head_channels(), self.spec.grid[0], self.spec.grid[1]]
    }

    /// Cost-model description, one entry per pipeline stage.
    pub fn layout(&self, store: &ParamStore) -> Result<Layout> {
        let s = self.spec.stem_channels;
        let [h, w] = self.spec.image;
        let stem_g = ConvSpec::same(3, 1).geometry(1, s, h, w)?;
        let stem = vec![
            LayerDesc::Conv {
                geometry: stem_g,
                binarized: false,
            },
            LayerDesc::Elementwise { params: 5 * s as u64 },
        ];
        let mut dims = [s, h, w];
        let mut encoder = Vec::new();
        for m in &self.encoder {
            let (l, d) = m.describe(store, dims)?;
            encoder.extend(l);
            dims = d;
        }
        let mut dims = self.scatter.out_dims();
        let mut bev = Vec::new();
        for m in &self.bev {
            let (l, d) = m.describe(store, dims)?;
            bev.extend(l);
            dims = d;
        }
        let (mut head, d) = self.head.describe(store, dims)?;
        let hc = self.spec.head_channels();
        head.push(LayerDesc::Conv {
            geometry: ConvSpec::same(1, 1).geometry(d[0], hc, d[1], d[2])?,
            binarized: false,
        });
        head.push(LayerDesc::Elementwise { params: hc as u64 });
        Ok(vec![
            ("stem".into(), stem),
            ("image_encoder".into(), encoder),
            ("view_transformer".into(), Vec::new()),
            ("bev_encoder".into(), bev),
            ("head".into(), head),
        ])
    }
}

impl Network for ToyNet {
    /// Input: every view of every scene, scene-major. Output: one
    /// `(Z * N_class, X, Y)` logit map per scene.
    fn forward<E: Exec>(&self, e: &mut E, x: &E::Val) -> Result<E::Val> {
        let d = e.dims(x)?;
        let [h, w] = self.spec.image;
        if d != [1, h, w] {
            return Err(Error::ShapeMismatch {
                expected: vec![1, h, w],
                got: d,
            });
        }
        let y = e.fp_conv(x, self.stem_w, None, ConvSpec::same(3, 1))?;
        let y = e.batch_norm(&y, self.stem_bn)?;
        let mut y = e.rprelu(&y, self.stem_act)?;
        for m in &self.encoder {
            y = m.forward(e, &y)?;
        }
        let mut y = e.scatter_views(&y, &self.scatter)?;
        for m in &self.bev {
            y = m.forward(e, &y)?;
        }
        let y = self.head.forward(e, &y)?;
        e.fp_conv(&y, self.cls_w, Some(self.cls_b), ConvSpec::same(1, 1))
    }
}

/// `(Z * N_class, X, Y) -> (N_class, X, Y, Z)`, channel `z * N_class + c`.
pub fn channel_to_height(t: &Tensor, n_class: usize) -> Result<Tensor> {
    let (ch, x, y) = t.chw()?;
    if n_class == 0 || ch % n_class != 0 {
        return Err(Error::ChannelPlanMismatch(format!("{ch} channels for {n_class} classes")));
    }
    let z = ch / n_class;
    let mut out = Tensor::zeros(&[n_class, x, y, z])?;
    let src = t.data();
    let dst = out.data_mut();
    for zi in 0..z {
        for c in 0..n_class {
            for p in 0..x * y {
                dst[(c * x * y + p) * z + zi] = src[(zi * n_class + c) * x * y + p];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`channel_to_height`].
pub fn height_to_channel(t: &Tensor) -> Result<Tensor> {
    let (n_class, x, y, z) = match *t.dims() {
        [c, x, y, z] => (c, x, y, z),
        _ => {
            return Err(Error::InvalidShape {
                dims: t.dims().to_vec(),
                reason: "expected (N_class, X, Y, Z)",
            })
        }
    };
    let mut out = Tensor::zeros(&[z * n_class, x, y])?;
    let src = t.data();
    let dst = out.data_mut();
    for zi in 0..z {
        for c in 0..n_class {
            for p in 0..x * y {
                dst[(zi * n_class + c) * x * y + p] = src[(c * x * y + p) * z + zi];
            }
        }
    }
    Ok(out)
}

/// Arg-max class per voxel of one logit map, as an `(X, Y, Z)` grid.
/// Ties go to the lower class.
pub fn predict_labels(logits: &Tensor, n_class: usize) -> Result<LabelTensor> {
    let (ch, x, y) = logits.chw()?;
    if n_class == 0 || ch % n_class != 0 {
        return Err(Error::ChannelPlanMismatch(format!("{ch} channels for {n_class} classes")));
    }
    let z = ch / n_class;
    let plane = x * y;
    let d = logits.data();
    let mut out = Vec::with_capacity(plane * z);
    for p in 0..plane {
        for zi in 0..z {
            let at = |c: usize| d[(zi * n_class + c) * plane + p];
            let best = (1..n_class).fold(0, |b, c| if at(c) > at(b) { c } else { b });
            out.push(best);
        }
    }
    LabelTensor::new(&[x, y, z], out)
}

/// Views of every scene, scene-major, as the network's input batch.
pub fn input_batch<'a>(scenes: impl IntoIterator<Item = &'a super::scene::ToyScene>) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for s in scenes {
        for v in 0..VIEWS.len() {
            out.push(s.view(v)?);
        }
    }
    Ok(out)
}

/// Inference-mode logits for a set of scenes.
pub fn infer<'a>(
    net: &ToyNet,
    store: &ParamStore,
    scenes: impl IntoIterator<Item = &'a super::scene::ToyScene>,
) -> Result<Vec<Tensor>> {
    let x = input_batch(scenes)?;
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let mut e = Eager::new(store, Mode::INFERENCE);
    net.forward(&mut e, &x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::cost::cost_of_network;
    use crate::occtoy::scene::{generate_scene, SceneConfig};
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    #[test]
    fn output_shape_and_reshape() {
        let spec = NetSpec::default();
        let mut store = ParamStore::new();
        let net = ToyNet::build(&spec, &mut store, 0).unwrap();
        let scenes: Vec<_> = (0..2).map(|i| generate_scene(i, &SceneConfig::default()).unwrap()).collect();
        let out = infer(&net, &store, &scenes).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].dims(), &[16, 16, 16]);
        assert_eq!(channel_to_height(&out[0], 4).unwrap().dims(), &[4, 16, 16, 4]);
    }

    #[test]
    fn channel_to_height_roundtrip() {
        let mut rng = rng_from_seed(1);
        let t = Tensor::from_fn(&[12, 3, 5], |_| rng.random_range(-1.0..1.0)).unwrap();
        let h = channel_to_height(&t, 4).unwrap();
        assert_eq!(h.dims(), &[4, 3, 5, 3]);
        // Channel z * N + c lands at class c, height z.
        assert_eq!(h.data()[((2 * 3 + 1) * 5 + 4) * 3 + 1], t.data()[((4 + 2) * 3 + 1) * 5 + 4]);
        assert_eq!(height_to_channel(&h).unwrap(), t);
        assert!(channel_to_height(&t, 5).is_err());
    }

    #[test]
    fn argmax_prediction() {
        // Two classes, two heights, one cell.
        let t = Tensor::new(&[4, 1, 1], vec![0.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(predict_labels(&t, 2).unwrap().data(), &[1, 0]);
    }

    #[test]
    fn layout_counts_every_parameter() {
        for scope in [Scope::Base, Scope::Tiny] {
            for v in Variant::ALL {
                let spec = NetSpec {
                    scope,
                    unit: BdcUnitConfig::new(v, 2, 0),
                    ..Default::default()
                };
                let mut store = ParamStore::new();
                let net = ToyNet::build(&spec, &mut store, 3).unwrap();
                let cost = cost_of_network(&net.layout(&store).unwrap()).unwrap();
                assert_eq!(cost.total.param_elements(), store.trainable_elements(), "{scope} {v}");
                let binarized: u64 = store
                    .entries()
                    .filter_map(|(id, _)| store.binary(id))
                    .map(|b| b.latent().len() as u64)
                    .sum();
                assert_eq!(cost.total.params_b_equiv, binarized);
            }
        }
    }

    #[test]
    fn tiny_scope_binarizes_more() {
        let cost = |scope| {
            let spec = NetSpec {
                scope,
                ..Default::default()
            };
            let mut store = ParamStore::new();
            let net = ToyNet::build(&spec, &mut store, 0).unwrap();
            cost_of_network(&net.layout(&store).unwrap()).unwrap().total
        };
        let (b, t) = (cost(Scope::Base), cost(Scope::Tiny));
        assert!(t.ops_f < b.ops_f);
        assert!(t.ops_b_equiv > b.ops_b_equiv);
    }

    #[test]
    fn scatter_rows_are_averages() {
        let s = bev_scatter([3, 8, 8], [16, 16, 4]);
        for view in &s.taps {
            assert_eq!(view.len(), 256);
            for cell in view {
                assert!((cell.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        // Top view: cell (5, 9) reads feature (2, 4); front view reads
        // column 2 over all 8 rows.
        assert_eq!(s.taps[0][5 * 16 + 9], vec![(2 * 8 + 4, 1.0)]);
        assert_eq!(s.taps[1][5 * 16 + 9].len(), 8);
    }

    #[test]
    fn bad_plans_rejected() {
        let mut store = ParamStore::new();
        for spec in [
            NetSpec {
                stem_channels: 0,
                ..Default::default()
            },
            NetSpec {
                image: [30, 32],
                ..Default::default()
            },
            NetSpec {
                n_class: 1,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                ToyNet::build(&spec, &mut store, 0),
                Err(Error::ChannelPlanMismatch(_))
            ));
        }
    }

    #[test]
    fn basic_only_bev_preserves_shape() {
        let spec = NetSpec::default();
        let mut store = ParamStore::new();
        let net = ToyNet::build(&spec, &mut store, 0).unwrap();
        let mut e = Eager::inference(&store);
        let x = vec![Tensor::full(&[32, 16, 16], 0.5).unwrap()];
        let y = net.bev[0].forward(&mut e, &x).unwrap();
        assert_eq!(y[0].dims(), &[32, 16, 16]);
    }
}
