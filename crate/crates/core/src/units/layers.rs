//! Single-sample layer primitives and their parameter handles.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistic momentum (weight of the new batch).
pub const BN_MOMENTUM: f64 = 0.1;

/// Handles of a channel-wise redistribution `k * x + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RedistIds {
    pub k: ParamId,
    pub b: ParamId,
}

impl RedistIds {
    /// Registers identity parameters (`k = 1`, `b = 0`).
    pub fn register(store: &mut ParamStore, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            k: store.add_dense(&format!("{prefix}.k"), Tensor::full(&[c], 1.0)?)?,
            b: store.add_dense(&format!("{prefix}.b"), Tensor::zeros(&[c])?)?,
        })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.k, self.b]
    }
}

/// Per-channel RPReLU parameters.
#[derive(Debug, Clone, Copy)]
pub struct RPReLUParams<'a> {
    pub beta: &'a [f64],
    pub gamma: &'a [f64],
    pub zeta: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RprIds {
    pub beta: ParamId,
    pub gamma: ParamId,
    pub zeta: ParamId,
}

impl RprIds {
    /// Registers `beta = 0.25`, `gamma = 0`, `zeta = 0`.
    pub fn register(store: &mut ParamStore, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            beta: store.add_dense(&format!("{prefix}.beta"), Tensor::full(&[c], 0.25)?)?,
            gamma: store.add_dense(&format!("{prefix}.gamma"), Tensor::zeros(&[c])?)?,
            zeta: store.add_dense(&format!("{prefix}.zeta"), Tensor::zeros(&[c])?)?,
        })
    }

    pub fn view<'a>(&self, store: &'a ParamStore) -> RPReLUParams<'a> {
        RPReLUParams {
            beta: store.data(self.beta),
            gamma: store.data(self.gamma),
            zeta: store.data(self.zeta),
        }
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.beta, self.gamma, self.zeta]
    }
}

/// Batch-norm affine parameters and running-statistic buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnIds {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnIds {
    pub fn register(store: &mut ParamStore, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add_dense(&format!("{prefix}.weight"), Tensor::full(&[c], 1.0)?)?,
            bias: store.add_dense(&format!("{prefix}.bias"), Tensor::zeros(&[c])?)?,
            running_mean: store.add_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[c])?)?,
            running_var: store.add_buffer(&format!("{prefix}.running_var"), Tensor::full(&[c], 1.0)?)?,
        })
    }

    pub fn trainable(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

fn check_channels(c: usize, lens: &[usize]) -> Result<()> {
    match lens.iter().find(|&&l| l != c) {
        Some(&l) => Err(Error::ChannelMismatch { tensor: c, params: l }),
        None => Ok(()),
    }
}

/// `y - gamma + zeta` above the threshold, `beta (y - gamma) + zeta` at or
/// below it.
pub fn rprelu(y: &Tensor, p: RPReLUParams<'_>) -> Result<Tensor> {
    let (c, h, w) = y.chw()?;
    check_channels(c, &[p.beta.len(), p.gamma.len(), p.zeta.len()])?;
    let mut out = y.clone();
    for (ci, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
        let (b, g, z) = (p.beta[ci], p.gamma[ci], p.zeta[ci]);
        for v in chunk {
            *v = rprelu_scalar(*v, b, g, z);
        }
    }
    Ok(out)
}

#[inline]
pub fn rprelu_scalar(y: f64, beta: f64, gamma: f64, zeta: f64) -> f64 {
    if y > gamma {
        y - gamma + zeta
    } else {
        beta * (y - gamma) + zeta
    }
}

/// Batch norm with fixed statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    weight: &[f64],
    bias: &[f64],
    mean: &[f64],
    var: &[f64],
) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    check_channels(c, &[weight.len(), bias.len(), mean.len(), var.len()])?;
    let mut out = x.clone();
    for (ci, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
        let inv = 1.0 / (var[ci] + BN_EPS).sqrt();
        for v in chunk {
            *v = (*v - mean[ci]) * inv * weight[ci] + bias[ci];
        }
    }
    Ok(out)
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased variance used for normalization.
    pub var: Vec<f64>,
    /// Element count per channel.
    pub count: usize,
}

impl BnBatchStats {
    /// Unbiased variance, as folded into running statistics.
    pub fn unbiased_var(&self) -> Vec<f64> {
        let n = self.count as f64;
        let f = if self.count > 1 { n / (n - 1.0) } else { 1.0 };
        self.var.iter().map(|v| v * f).collect()
    }
}

/// Batch norm over a batch using its own statistics.
pub fn batch_norm_train(
    batch: &[Tensor],
    weight: &[f64],
    bias: &[f64],
) -> Result<(Vec<Tensor>, BnBatchStats)> {
    let first = batch.first().ok_or(Error::EmptyTensor)?;
    let (c, h, w) = first.chw()?;
    check_channels(c, &[weight.len(), bias.len()])?;
    for t in batch {
        first.expect_same_shape(t)?;
    }
    let plane = h * w;
    let count = plane * batch.len();
    let mut mean = vec![0.0; c];
    for t in batch {
        for (ci, chunk) in t.data().chunks(plane).enumerate() {
            mean[ci] += chunk.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for t in batch {
        for (ci, chunk) in t.data().chunks(plane).enumerate() {
            var[ci] += chunk.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let out = batch
        .iter()
        .map(|t| batch_norm_eval(t, weight, bias, &mean, &var))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, BnBatchStats { mean, var, count }))
}

/// Spatial mean per channel, `(C, H, W) -> (C, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let n = (h * w) as f64;
    let data = x.data().chunks(h * w).map(|ch| ch.iter().sum::<f64>() / n).collect();
    Tensor::new(&[c, 1, 1], data)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// `out[c, h, w] = s[c] * x[c, h, w]` for `s` of shape `(C, 1, 1)`.
pub fn scale_channels(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let (cs, hs, ws) = s.chw()?;
    if cs != c || hs != 1 || ws != 1 {
        return Err(Error::ShapeMismatch {
            expected: vec![c, 1, 1],
            got: s.dims().to_vec(),
        });
    }
    let mut out = x.clone();
    for (ci, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
        let g = s.data()[ci];
        chunk.iter_mut().for_each(|v| *v *= g);
    }
    Ok(out)
}

/// 2x2 mean pooling with stride 2; requires even `H` and `W`.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::IndivisibleShape {
            dims: x.dims().to_vec(),
            module: "2x2 average pooling",
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    Tensor::from_fn(&[c, ho, wo], |i| {
        let (ci, r) = (i / (ho * wo), i % (ho * wo));
        let (y, xx) = (2 * (r / wo), 2 * (r % wo));
        let at = |yy: usize, xc: usize| d[(ci * h + yy) * w + xc];
        0.25 * (at(y, xx) + at(y, xx + 1) + at(y + 1, xx) + at(y + 1, xx + 1))
    })
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let d = x.data();
    Tensor::from_fn(&[c, 2 * h, 2 * w], |i| {
        let (ci, r) = (i / (4 * h * w), i % (4 * h * w));
        let (y, xx) = (r / (2 * w), r % (2 * w));
        d[(ci * h + y / 2) * w + xx / 2]
    })
}

/// Mean of channel pairs `(2c, 2c + 1)`; requires even `C`.
pub fn channel_pair_mean(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if c % 2 != 0 {
        return Err(Error::IndivisibleShape {
            dims: x.dims().to_vec(),
            module: "channel-pair mean",
        });
    }
    let plane = h * w;
    let d = x.data();
    Tensor::from_fn(&[c / 2, h, w], |i| {
        let (ci, p) = (i / plane, i % plane);
        0.5 * (d[2 * ci * plane + p] + d[(2 * ci + 1) * plane + p])
    })
}

/// Channel-wise concatenation of two `(C_i, H, W)` tensors.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::ShapeMismatch {
            expected: vec![cb, ha, wa],
            got: b.dims().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[ca + cb, ha, wa], data)
}

/// Fixed linear scatter from a group of per-view feature maps onto one
/// output grid. Output channel block `v` holds view `v`'s channels; each
/// output pixel is a weighted sum of input pixels of its view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewScatter {
    /// `(C, h, w)` of every view's input.
    pub in_dims: [usize; 3],
    /// Output spatial size.
    pub out_hw: [usize; 2],
    /// `taps[v][out_pixel]` lists `(in_pixel, weight)`.
    pub taps: Vec<Vec<Vec<(usize, f64)>>>,
}

impl ViewScatter {
    pub fn views(&self) -> usize {
        self.taps.len()
    }

    pub fn out_dims(&self) -> [usize; 3] {
        [self.in_dims[0] * self.views(), self.out_hw[0], self.out_hw[1]]
    }

    pub fn forward(&self, views: &[Tensor]) -> Result<Tensor> {
        if views.len() != self.views() {
            return Err(Error::LengthMismatch(format!(
                "{} views given, scatter expects {}",
                views.len(),
                self.views()
            )));
        }
        let [c, h, w] = self.in_dims;
        let plane_out = self.out_hw[0] * self.out_hw[1];
        let mut out = Tensor::zeros(&self.out_dims())?;
        for (v, x) in views.iter().enumerate() {
            if x.dims() != self.in_dims {
                return Err(Error::ShapeMismatch {
                    expected: self.in_dims.to_vec(),
                    got: x.dims().to_vec(),
                });
            }
            for ci in 0..c {
                let src = &x.data()[ci * h * w..(ci + 1) * h * w];
                let dst = &mut out.data_mut()[(v * c + ci) * plane_out..(v * c + ci + 1) * plane_out];
                for (p, taps) in self.taps[v].iter().enumerate() {
                    dst[p] = taps.iter().map(|&(q, wt)| wt * src[q]).sum();
                }
            }
        }
        Ok(out)
    }

    /// Transpose of [`Self::forward`].
    pub fn backward(&self, dy: &Tensor) -> Result<Vec<Tensor>> {
        if dy.dims() != self.out_dims() {
            return Err(Error::ShapeMismatch {
                expected: self.out_dims().to_vec(),
                got: dy.dims().to_vec(),
            });
        }
        let [c, h, w] = self.in_dims;
        let plane_out = self.out_hw[0] * self.out_hw[1];
        (0..self.views())
            .map(|v| {
                let mut dx = Tensor::zeros(&self.in_dims)?;
                for ci in 0..c {
                    let g = &dy.data()[(v * c + ci) * plane_out..(v * c + ci + 1) * plane_out];
                    let dst = &mut dx.data_mut()[ci * h * w..(ci + 1) * h * w];
                    for (p, taps) in self.taps[v].iter().enumerate() {
                        for &(q, wt) in taps {
                            dst[q] += wt * g[p];
                        }
                    }
                }
                Ok(dx)
            })
            .collect()
    }
}
