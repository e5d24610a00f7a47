//! 2-D convolution: the XNOR/popcount binarized kernel and the direct-loop
//! full-precision reference it must agree with.
//!
//! All convolutions are cross-correlations over `(C, H, W)` activations
//! with `(C_out, C_in, k, k)` weights. In the binarized domain padding
//! positions read as `-1`: a zero-padded pre-sign activation binarizes to
//! `sign(0) = -1`.

use rand::Rng;

use crate::binarize::{sign, BinaryConvParams};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::rng_from_seed;
use crate::tensor::{bit_pack, bit_unpack, popcount_dot_unchecked, BitTensor, Tensor};

/// Shape bookkeeping for one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeometry {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        let g = Self {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            h,
            w,
        };
        g.validate()?;
        Ok(g)
    }

    /// "Same" geometry: padding `k / 2`.
    pub fn same(c_in: usize, c_out: usize, kernel: usize, stride: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(c_in, c_out, kernel, stride, kernel / 2, h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel != 1 && self.kernel != 3 {
            return Err(Error::GeometryMismatch(format!(
                "kernel {} not in {{1, 3}}",
                self.kernel
            )));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::GeometryMismatch(format!(
                "stride {} not in {{1, 2}}",
                self.stride
            )));
        }
        if self.c_in == 0 || self.c_out == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::GeometryMismatch("zero-sized dimension".into()));
        }
        if self.h + 2 * self.padding < self.kernel || self.w + 2 * self.padding < self.kernel {
            return Err(Error::GeometryMismatch(format!(
                "kernel {} larger than padded input {}x{}",
                self.kernel,
                self.h + 2 * self.padding,
                self.w + 2 * self.padding
            )));
        }
        Ok(())
    }

    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [self.c_in, self.h, self.w]
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }

    pub fn output_dims(&self) -> [usize; 3] {
        [self.c_out, self.h_out(), self.w_out()]
    }

    /// Input coordinate read by output `o` at kernel tap `t`, if in bounds.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + t).checked_sub(self.padding)?;
        (p < extent).then_some(p)
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        if dims != self.input_dims() {
            return Err(Error::GeometryMismatch(format!(
                "input {dims:?} does not match geometry {:?}",
                self.input_dims()
            )));
        }
        Ok(())
    }

    fn check_weights(&self, dims: &[usize]) -> Result<()> {
        if dims != self.weight_dims() {
            return Err(Error::GeometryMismatch(format!(
                "weights {dims:?} do not match geometry {:?}",
                self.weight_dims()
            )));
        }
        Ok(())
    }

    fn check_output(&self, dims: &[usize]) -> Result<()> {
        if dims != self.output_dims() {
            return Err(Error::GeometryMismatch(format!(
                "output gradient {dims:?} does not match geometry {:?}",
                self.output_dims()
            )));
        }
        Ok(())
    }
}

/// Direct-loop cross-correlation with constant `pad_value` outside bounds.
pub fn conv2d_fp(x: &Tensor, w: &Tensor, g: &ConvGeometry, pad_value: f64) -> Result<Tensor> {
    conv2d_fp_bias(x, w, None, g, pad_value)
}

/// [`conv2d_fp`] plus an optional per-output-channel bias.
pub fn conv2d_fp_bias(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f64]>,
    g: &ConvGeometry,
    pad_value: f64,
) -> Result<Tensor> {
    g.validate()?;
    g.check_input(x.dims())?;
    g.check_weights(w.dims())?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::ChannelMismatch {
                tensor: g.c_out,
                params: b.len(),
            });
        }
    }
    let (ho, wo, k) = (g.h_out(), g.w_out(), g.kernel);
    let plane = ho * wo;
    let mut out = Tensor::zeros(&g.output_dims())?;
    let (xd, wd) = (x.data(), w.data());
    par::for_each_chunk_mut(out.data_mut(), plane, |o, dst| {
        let b0 = bias.map_or(0.0, |b| b[o]);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c in 0..g.c_in {
                    for ky in 0..k {
                        let iy = g.src(oy, ky, g.h);
                        for kx in 0..k {
                            let wv = wd[((o * g.c_in + c) * k + ky) * k + kx];
                            let xv = match (iy, g.src(ox, kx, g.w)) {
                                (Some(iy), Some(ix)) => xd[(c * g.h + iy) * g.w + ix],
                                _ => pad_value,
                            };
                            acc += xv * wv;
                        }
                    }
                }
                dst[oy * wo + ox] = acc + b0;
            }
        }
    });
    Ok(out)
}

/// Gradient of [`conv2d_fp`] with respect to its input.
pub fn conv2d_fp_backward_input(dy: &Tensor, w: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    g.check_output(dy.dims())?;
    g.check_weights(w.dims())?;
    let (ho, wo, k) = (g.h_out(), g.w_out(), g.kernel);
    let mut dx = Tensor::zeros(&g.input_dims())?;
    let (dyd, wd) = (dy.data(), w.data());
    par::for_each_chunk_mut(dx.data_mut(), g.h * g.w, |c, dst| {
        for o in 0..g.c_out {
            for oy in 0..ho {
                for ky in 0..k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..wo {
                        let gy = dyd[(o * ho + oy) * wo + ox];
                        for kx in 0..k {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                dst[iy * g.w + ix] += gy * wd[((o * g.c_in + c) * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(dx)
}

/// Gradient of [`conv2d_fp`] with respect to its weights; padded positions
/// contribute `pad_value`.
pub fn conv2d_fp_backward_weight(
    x: &Tensor,
    dy: &Tensor,
    g: &ConvGeometry,
    pad_value: f64,
) -> Result<Tensor> {
    g.check_input(x.dims())?;
    g.check_output(dy.dims())?;
    let (ho, wo, k) = (g.h_out(), g.w_out(), g.kernel);
    let mut dw = Tensor::zeros(&g.weight_dims())?;
    let (xd, dyd) = (x.data(), dy.data());
    par::for_each_chunk_mut(dw.data_mut(), g.c_in * k * k, |o, dst| {
        for c in 0..g.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = g.src(oy, ky, g.h);
                        for ox in 0..wo {
                            let xv = match (iy, g.src(ox, kx, g.w)) {
                                (Some(iy), Some(ix)) => xd[(c * g.h + iy) * g.w + ix],
                                _ => pad_value,
                            };
                            acc += xv * dyd[(o * ho + oy) * wo + ox];
                        }
                    }
                    dst[(c * k + ky) * k + kx] = acc;
                }
            }
        }
    });
    Ok(dw)
}

/// Packs a ±1 `(C, H, W)` activation as `(H, W, C)` bits so each spatial
/// position is one row of channel bits.
pub fn pack_activation(x: &Tensor) -> Result<BitTensor> {
    bit_pack(&x.chw_to_hwc()?)
}

/// Inverse of [`pack_activation`].
pub fn unpack_activation(xb: &BitTensor) -> Result<Tensor> {
    bit_unpack(xb).hwc_to_chw()
}

/// Binarized convolution: per output element, an integer ±1 correlation via
/// XNOR/popcount over channel words, times the layer scale. `xb` is an
/// `(H, W, C_in)` packed activation (see [`pack_activation`]).
pub fn conv2d_bit(xb: &BitTensor, params: &BinaryConvParams, g: &ConvGeometry) -> Result<Tensor> {
    g.validate()?;
    if xb.dims() != [g.h, g.w, g.c_in] {
        return Err(Error::GeometryMismatch(format!(
            "packed input {:?} does not match (H, W, C_in) = {:?}",
            xb.dims(),
            [g.h, g.w, g.c_in]
        )));
    }
    let (co, ci, k) = params.dims();
    if (co, ci, k) != (g.c_out, g.c_in, g.kernel) {
        return Err(Error::GeometryMismatch(format!(
            "weights ({co}, {ci}, {k}, {k}) do not match geometry {:?}",
            g.weight_dims()
        )));
    }
    let bits = params.kernel_bits();
    // Dot product of an all-(-1) padding row with each kernel tap.
    let pad_dot: Vec<i32> = (0..co * k * k)
        .map(|r| ci as i32 - 2 * bits.row(r).iter().map(|w| w.count_ones() as i32).sum::<i32>())
        .collect();
    let (ho, wo) = (g.h_out(), g.w_out());
    let scale = params.scale();
    let mut out = Tensor::zeros(&g.output_dims())?;
    par::for_each_chunk_mut(out.data_mut(), ho * wo, |o, dst| {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc: i32 = 0;
                for ky in 0..k {
                    let iy = g.src(oy, ky, g.h);
                    for kx in 0..k {
                        let tap = (o * k + ky) * k + kx;
                        acc += match (iy, g.src(ox, kx, g.w)) {
                            (Some(iy), Some(ix)) => {
                                popcount_dot_unchecked(xb.row(iy * g.w + ix), bits.row(tap), ci) as i32
                            }
                            _ => pad_dot[tap],
                        };
                    }
                }
                dst[oy * wo + ox] = scale * acc as f64;
            }
        }
    });
    Ok(out)
}

/// Result of comparing the packed kernel against the float reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceReport {
    /// Max deviation from `scale * conv2d_fp(x, sign(w), pad = -1)`. Both
    /// sides apply the scale once to an exact integer, so this is zero.
    pub exact_deviation: f64,
    /// Max deviation from `conv2d_fp(x, scale * sign(w), pad = -1)`, which
    /// rounds after every term; bounded by a few ulps of the output.
    pub scaled_weight_deviation: f64,
}

/// Runs both convolution paths on a random ±1 activation and random latent
/// weights derived from `seed`.
pub fn check_equivalence(g: &ConvGeometry, seed: u64) -> Result<EquivalenceReport> {
    g.validate()?;
    let mut rng = rng_from_seed(seed);
    let x = Tensor::from_fn(&g.input_dims(), |_| if rng.random::<bool>() { 1.0 } else { -1.0 })?;
    let latent = Tensor::from_fn(&g.weight_dims(), |_| rng.random_range(-1.0..1.0))?;
    let params = BinaryConvParams::new(latent, 1.0)?;
    let got = conv2d_bit(&pack_activation(&x)?, &params, g)?;

    let signs = params.latent().map(sign);
    let exact = conv2d_fp(&x, &signs, g, -1.0)?.scale(params.scale());
    let scaled = conv2d_fp(&x, &params.effective_weights(), g, -1.0)?;
    Ok(EquivalenceReport {
        exact_deviation: got.max_abs_diff(&exact)?,
        scaled_weight_deviation: got.max_abs_diff(&scaled)?,
    })
}
