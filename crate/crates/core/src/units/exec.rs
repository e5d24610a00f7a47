//! Execution back-ends for network structure.
//!
//! Units and modules describe their computation once against [`Exec`]. The
//! eager back-end ([`Eager`]) evaluates immediately; the tape in
//! [`crate::autograd`] evaluates with the very same per-sample primitives and
//! records what it needs for the backward pass. Values are batches: one
//! `(C, H, W)` tensor per sample.

use crate::binarize::{redistribute, sign_forward, tanh_surrogate_unchecked, RedistParams};
use crate::bitconv::{conv2d_bit, conv2d_fp, conv2d_fp_bias, pack_activation, ConvGeometry};
use crate::error::{Error, Result};
use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::layers::{self, BnIds, RedistIds, RprIds, ViewScatter};

/// Forward behaviour of the sign function and binarized convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignMode {
    /// True sign on activations and `scale * sign(w)` on weights; convs run
    /// on packed bits.
    Hard,
    /// `tanh(alpha x)` on activations and `scale * clip(w, -1, 1)` on
    /// weights, with the scale frozen. The network is then differentiable
    /// and its exact gradient equals the straight-through gradient.
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub sign: SignMode,
    pub bn: BnMode,
}

impl Mode {
    pub const INFERENCE: Mode = Mode {
        sign: SignMode::Hard,
        bn: BnMode::Eval,
    };
    pub const TRAIN: Mode = Mode {
        sign: SignMode::Hard,
        bn: BnMode::Train,
    };
}

/// Kernel, stride and padding of a convolution; channels and spatial size
/// come from the input at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Padding `k / 2`.
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn geometry(&self, c_in: usize, c_out: usize, h: usize, w: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(c_in, c_out, self.kernel, self.stride, self.padding, h, w)
    }

    /// Geometry for an input of `dims = (C_in, H, W)` and weights `w_dims`.
    pub fn geometry_for(&self, dims: &[usize], w_dims: &[usize]) -> Result<ConvGeometry> {
        let (&[c, h, w], &[co, ci, k, k2]) = (dims, w_dims) else {
            return Err(Error::GeometryMismatch(format!(
                "input {dims:?} / weights {w_dims:?}"
            )));
        };
        if ci != c || k != self.kernel || k2 != self.kernel {
            return Err(Error::GeometryMismatch(format!(
                "input {dims:?} incompatible with weights {w_dims:?} (kernel {})",
                self.kernel
            )));
        }
        self.geometry(c, co, h, w)
    }
}

/// Operations a network structure is written against.
pub trait Exec {
    type Val: Clone;

    fn store(&self) -> &ParamStore;
    fn mode(&self) -> Mode;
    /// Per-sample dimensions of a value.
    fn dims(&self, v: &Self::Val) -> Result<Vec<usize>>;

    fn redistribute(&mut self, x: &Self::Val, p: RedistIds) -> Result<Self::Val>;
    fn sign(&mut self, x: &Self::Val, alpha: f64) -> Result<Self::Val>;
    fn bin_conv(&mut self, x: &Self::Val, w: ParamId, spec: ConvSpec) -> Result<Self::Val>;
    fn fp_conv(&mut self, x: &Self::Val, w: ParamId, bias: Option<ParamId>, spec: ConvSpec) -> Result<Self::Val>;
    fn batch_norm(&mut self, x: &Self::Val, p: BnIds) -> Result<Self::Val>;
    fn rprelu(&mut self, x: &Self::Val, p: RprIds) -> Result<Self::Val>;
    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn global_avg_pool(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn sigmoid(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn scale_channels(&mut self, x: &Self::Val, s: &Self::Val) -> Result<Self::Val>;
    fn avg_pool2(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn upsample2(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn channel_pair_mean(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn concat_channels(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    /// Groups of `scatter.views()` consecutive samples become one sample.
    fn scatter_views(&mut self, x: &Self::Val, scatter: &ViewScatter) -> Result<Self::Val>;
}

/// Anything with a forward pass written against [`Exec`].
pub trait Network {
    fn forward<E: Exec>(&self, e: &mut E, x: &E::Val) -> Result<E::Val>;
}

pub type Batch = Vec<Tensor>;

/// Per-sample map shared by both back-ends.
pub(crate) fn map_batch<F>(x: &[Tensor], f: F) -> Result<Batch>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync + Send,
{
    par::map_slice(x, f).into_iter().collect()
}

pub(crate) fn zip_batch<F>(a: &[Tensor], b: &[Tensor], f: F) -> Result<Batch>
where
    F: Fn(&Tensor, &Tensor) -> Result<Tensor> + Sync + Send,
{
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(format!(
            "batches of {} and {} samples",
            a.len(),
            b.len()
        )));
    }
    par::map_range(a.len(), |i| f(&a[i], &b[i])).into_iter().collect()
}

pub(crate) fn redistribute_batch(store: &ParamStore, x: &[Tensor], p: RedistIds) -> Result<Batch> {
    let rp = RedistParams {
        k: store.data(p.k),
        b: store.data(p.b),
    };
    map_batch(x, |t| redistribute(t, rp))
}

pub(crate) fn sign_batch(mode: SignMode, x: &[Tensor], alpha: f64) -> Result<Batch> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::NonPositiveAlpha(alpha));
    }
    match mode {
        SignMode::Hard => map_batch(x, |t| Ok(sign_forward(t))),
        SignMode::Surrogate => map_batch(x, |t| Ok(t.map(|v| tanh_surrogate_unchecked(v, alpha).0))),
    }
}

/// Binarized conv; returns outputs and the geometry.
pub(crate) fn bin_conv_batch(
    store: &ParamStore,
    mode: SignMode,
    x: &[Tensor],
    w: ParamId,
    spec: ConvSpec,
) -> Result<(Batch, ConvGeometry)> {
    let params = store.expect_binary(w)?;
    let first = x.first().ok_or(Error::EmptyTensor)?;
    let g = spec.geometry_for(first.dims(), params.latent().dims())?;
    let out = match mode {
        SignMode::Hard => map_batch(x, |t| conv2d_bit(&pack_activation(t)?, params, &g))?,
        SignMode::Surrogate => {
            let wc = params.clipped_weights();
            map_batch(x, |t| conv2d_fp(t, &wc, &g, -1.0))?
        }
    };
    Ok((out, g))
}

pub(crate) fn fp_conv_batch(
    store: &ParamStore,
    x: &[Tensor],
    w: ParamId,
    bias: Option<ParamId>,
    spec: ConvSpec,
) -> Result<(Batch, ConvGeometry)> {
    let wt = store.tensor(w);
    let first = x.first().ok_or(Error::EmptyTensor)?;
    let g = spec.geometry_for(first.dims(), wt.dims())?;
    let b = bias.map(|id| store.data(id));
    Ok((map_batch(x, |t| conv2d_fp_bias(t, wt, b, &g, 0.0))?, g))
}

pub(crate) fn bn_eval_batch(store: &ParamStore, x: &[Tensor], p: BnIds) -> Result<Batch> {
    let (wt, b, m, v) = (
        store.data(p.weight),
        store.data(p.bias),
        store.data(p.running_mean),
        store.data(p.running_var),
    );
    map_batch(x, |t| layers::batch_norm_eval(t, wt, b, m, v))
}

pub(crate) fn scatter_batch(x: &[Tensor], scatter: &ViewScatter) -> Result<Batch> {
    let v = scatter.views();
    if !x.len().is_multiple_of(v) {
        return Err(Error::LengthMismatch(format!(
            "{} samples cannot be grouped into {v} views",
            x.len()
        )));
    }
    par::map_range(x.len() / v, |i| scatter.forward(&x[i * v..(i + 1) * v]))
        .into_iter()
        .collect()
}

/// Evaluates immediately against a parameter store.
pub struct Eager<'a> {
    store: &'a ParamStore,
    mode: Mode,
}

impl<'a> Eager<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self { store, mode }
    }

    /// Hard sign, running batch-norm statistics.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, Mode::INFERENCE)
    }
}

impl Exec for Eager<'_> {
    type Val = Batch;

    fn store(&self) -> &ParamStore {
        self.store
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn dims(&self, v: &Batch) -> Result<Vec<usize>> {
        Ok(v.first().ok_or(Error::EmptyTensor)?.dims().to_vec())
    }

    fn redistribute(&mut self, x: &Batch, p: RedistIds) -> Result<Batch> {
        redistribute_batch(self.store, x, p)
    }

    fn sign(&mut self, x: &Batch, alpha: f64) -> Result<Batch> {
        sign_batch(self.mode.sign, x, alpha)
    }

    fn bin_conv(&mut self, x: &Batch, w: ParamId, spec: ConvSpec) -> Result<Batch> {
        Ok(bin_conv_batch(self.store, self.mode.sign, x, w, spec)?.0)
    }

    fn fp_conv(&mut self, x: &Batch, w: ParamId, bias: Option<ParamId>, spec: ConvSpec) -> Result<Batch> {
        Ok(fp_conv_batch(self.store, x, w, bias, spec)?.0)
    }

    fn batch_norm(&mut self, x: &Batch, p: BnIds) -> Result<Batch> {
        match self.mode.bn {
            BnMode::Eval => bn_eval_batch(self.store, x, p),
            BnMode::Train => {
                Ok(layers::batch_norm_train(x, self.store.data(p.weight), self.store.data(p.bias))?.0)
            }
        }
    }

    fn rprelu(&mut self, x: &Batch, p: RprIds) -> Result<Batch> {
        let view = p.view(self.store);
        map_batch(x, |t| layers::rprelu(t, view))
    }

    fn add(&mut self, a: &Batch, b: &Batch) -> Result<Batch> {
        zip_batch(a, b, |x, y| x.add(y))
    }

    fn global_avg_pool(&mut self, x: &Batch) -> Result<Batch> {
        map_batch(x, layers::global_avg_pool)
    }

    fn sigmoid(&mut self, x: &Batch) -> Result<Batch> {
        map_batch(x, |t| Ok(layers::sigmoid(t)))
    }

    fn scale_channels(&mut self, x: &Batch, s: &Batch) -> Result<Batch> {
        zip_batch(x, s, layers::scale_channels)
    }

    fn avg_pool2(&mut self, x: &Batch) -> Result<Batch> {
        map_batch(x, layers::avg_pool2)
    }

    fn upsample2(&mut self, x: &Batch) -> Result<Batch> {
        map_batch(x, layers::upsample2)
    }

    fn channel_pair_mean(&mut self, x: &Batch) -> Result<Batch> {
        map_batch(x, layers::channel_pair_mean)
    }

    fn concat_channels(&mut self, a: &Batch, b: &Batch) -> Result<Batch> {
        zip_batch(a, b, layers::concat_channels)
    }

    fn scatter_views(&mut self, x: &Batch, scatter: &ViewScatter) -> Result<Batch> {
        scatter_batch(x, scatter)
    }
}
