//! Scalar binarization math: channel-wise redistribution, the sign
//! function and its tanh surrogate, and scaled weight binarization.

use crate::error::{Error, Result};
use crate::tensor::{bit_pack, BitTensor, Tensor};

/// Per-channel affine `k * x + b` applied before binarization.
#[derive(Debug, Clone, Copy)]
pub struct RedistParams<'a> {
    pub k: &'a [f64],
    pub b: &'a [f64],
}

/// `out[c, h, w] = k[c] * x[c, h, w] + b[c]`.
pub fn redistribute(x: &Tensor, p: RedistParams<'_>) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if p.k.len() != c || p.b.len() != c {
        return Err(Error::ChannelMismatch {
            tensor: c,
            params: p.k.len().max(p.b.len()),
        });
    }
    let plane = h * w;
    let mut out = x.clone();
    for (ci, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (k, b) = (p.k[ci], p.b[ci]);
        for v in chunk {
            *v = k * *v + b;
        }
    }
    Ok(out)
}

/// `+1` for `x > 0`, `-1` otherwise (zero maps to `-1`).
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn sign_forward(x: &Tensor) -> Tensor {
    x.map(sign)
}

/// `(tanh(alpha x), alpha (1 - tanh^2(alpha x)))`.
pub fn tanh_surrogate(x: f64, alpha: f64) -> Result<(f64, f64)> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::NonPositiveAlpha(alpha));
    }
    Ok(tanh_surrogate_unchecked(x, alpha))
}

#[inline]
pub(crate) fn tanh_surrogate_unchecked(x: f64, alpha: f64) -> (f64, f64) {
    let t = (alpha * x).tanh();
    (t, alpha * (1.0 - t * t))
}

/// Mean absolute value of `w` and its packed signs (same shape as `w`).
pub fn binarize_weights(w: &Tensor) -> Result<(f64, BitTensor)> {
    if w.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let scale = w.data().iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
    let signs = bit_pack(&sign_forward(w))?;
    Ok((scale, signs))
}

/// Latent weights of a binarized convolution with their derived scale and
/// sign bits. Shape `(C_out, C_in, k, k)`.
///
/// `kernel_bits` repacks the signs as `(C_out, k, k, C_in)` so each kernel
/// tap is one contiguous row of input-channel bits, matching the activation
/// packing used by [`crate::bitconv::conv2d_bit`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryConvParams {
    latent: Tensor,
    scale: f64,
    signs: BitTensor,
    kernel_bits: BitTensor,
    alpha: f64,
}

impl BinaryConvParams {
    pub fn new(latent: Tensor, alpha: f64) -> Result<Self> {
        if alpha.is_nan() || alpha <= 0.0 {
            return Err(Error::NonPositiveAlpha(alpha));
        }
        if latent.dims().len() != 4 || latent.dims()[2] != latent.dims()[3] {
            return Err(Error::InvalidShape {
                dims: latent.dims().to_vec(),
                reason: "binarized conv weights must be (C_out, C_in, k, k)",
            });
        }
        let (scale, signs) = binarize_weights(&latent)?;
        let kernel_bits = pack_kernel(&latent)?;
        Ok(Self {
            latent,
            scale,
            signs,
            kernel_bits,
            alpha,
        })
    }

    pub fn latent(&self) -> &Tensor {
        &self.latent
    }

    /// Mutable latent weights. Call [`Self::refresh`] after editing.
    pub fn latent_mut(&mut self) -> &mut Tensor {
        &mut self.latent
    }

    /// Recomputes scale and sign bits from the latent weights.
    pub fn refresh(&mut self) -> Result<()> {
        let (scale, signs) = binarize_weights(&self.latent)?;
        self.scale = scale;
        self.signs = signs;
        self.kernel_bits = pack_kernel(&self.latent)?;
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Overrides the scale without touching the latent weights. The next
    /// [`Self::refresh`] restores `mean(|w|)`.
    pub fn set_scale(&mut self, scale: f64) {
        self.scale = scale;
    }

    pub fn signs(&self) -> &BitTensor {
        &self.signs
    }

    pub fn kernel_bits(&self) -> &BitTensor {
        &self.kernel_bits
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `(c_out, c_in, k)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.latent.dims();
        (d[0], d[1], d[2])
    }

    /// `scale * sign(w)` in latent layout.
    pub fn effective_weights(&self) -> Tensor {
        let s = self.scale;
        self.latent.map(|w| s * sign(w))
    }

    /// `scale * clip(w, -1, 1)`, the differentiable stand-in used when the
    /// network runs in surrogate mode.
    pub fn clipped_weights(&self) -> Tensor {
        let s = self.scale;
        self.latent.map(|w| s * w.clamp(-1.0, 1.0))
    }
}

fn pack_kernel(latent: &Tensor) -> Result<BitTensor> {
    let d = latent.dims();
    let (co, ci, k) = (d[0], d[1], d[2]);
    let mut reordered = vec![0.0; latent.len()];
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let v = latent.data()[((o * ci + c) * k + ky) * k + kx];
                    reordered[((o * k + ky) * k + kx) * ci + c] = sign(v);
                }
            }
        }
    }
    bit_pack(&Tensor::new(&[co, k, k, ci], reordered)?)
}

/// Straight-through gradient for latent weights:
/// `upstream * scale * 1{|w| <= 1}` with the scale held constant.
pub fn weight_ste_grad(upstream: &Tensor, params: &BinaryConvParams) -> Result<Tensor> {
    params.latent.expect_same_shape(upstream)?;
    let s = params.scale;
    upstream.zip_map(&params.latent, |g, w| if w.abs() <= 1.0 { g * s } else { 0.0 })
}
