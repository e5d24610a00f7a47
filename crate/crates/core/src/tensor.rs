//! Dense and bit-packed tensors.
//!
//! [`Tensor`] is a row-major real tensor. [`BitTensor`] stores a ±1 tensor
//! with one bit per element: bit `1` is `+1`, bit `0` is `-1`. Bits are
//! packed along the innermost dimension, LSB first, and every row of the
//! innermost dimension starts on a fresh word so that a row can be fed to
//! [`popcount_dot`] directly. Unused bits in the last word of each row are
//! always zero.

use crate::error::{Error, Result};

/// Bits per packed word.
pub const WORD_BITS: usize = 64;

/// Dimensions of a tensor, rank 1 to 4, every dimension at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
    len: usize,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: "rank must be between 1 and 4",
            });
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: "all dimensions must be at least 1",
            });
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: "element count overflows",
            })?;
        Ok(Self {
            dims: dims.to_vec(),
            len,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Size of the innermost dimension.
    pub fn inner(&self) -> usize {
        *self.dims.last().expect("shape has rank >= 1")
    }

    /// Number of innermost rows (product of all but the last dimension).
    pub fn rows(&self) -> usize {
        self.len / self.inner()
    }
}

/// Dense row-major real tensor. Activations use `(C, H, W)` per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if data.len() != shape.len() {
            return Err(Error::DataLength {
                expected: shape.len(),
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.len()];
        Ok(Self { shape, data })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.len()).map(&mut f).collect();
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(C, H, W)` view of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims() {
            &[c, h, w] => Ok((c, h, w)),
            d => Err(Error::InvalidShape {
                dims: d.to_vec(),
                reason: "expected a (C, H, W) activation",
            }),
        }
    }

    /// Same data, new dimensions with equal element count.
    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.dims().to_vec(),
                got: other.dims().to_vec(),
            });
        }
        Ok(())
    }

    /// Reorders a `(C, H, W)` tensor to `(H, W, C)`.
    pub fn chw_to_hwc(&self) -> Result<Self> {
        let (c, h, w) = self.chw()?;
        let mut out = vec![0.0; self.len()];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(y * w + x) * c + ci] = self.data[(ci * h + y) * w + x];
                }
            }
        }
        Self::new(&[h, w, c], out)
    }

    /// Reorders an `(H, W, C)` tensor to `(C, H, W)`.
    pub fn hwc_to_chw(&self) -> Result<Self> {
        let (h, w, c) = self.chw()?;
        let mut out = vec![0.0; self.len()];
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    out[(ci * h + y) * w + x] = self.data[(y * w + x) * c + ci];
                }
            }
        }
        Self::new(&[c, h, w], out)
    }
}

/// Bit-packed ±1 tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    shape: Shape,
    words: Vec<u64>,
    row_words: usize,
    n_valid_tail: usize,
}

/// Number of words needed to hold `n` bits.
pub fn words_for(n: usize) -> usize {
    n.div_ceil(WORD_BITS)
}

/// Mask selecting the low `valid` bits of a word (`valid` in `1..=64`).
fn tail_mask(valid: usize) -> u64 {
    if valid >= WORD_BITS {
        u64::MAX
    } else {
        (1u64 << valid) - 1
    }
}

impl BitTensor {
    /// Builds a tensor from raw words. Rejects set bits in tail padding.
    pub fn from_words(dims: &[usize], words: Vec<u64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let row_words = words_for(shape.inner());
        let expected = shape.rows() * row_words;
        if words.len() != expected {
            return Err(Error::DataLength {
                expected,
                got: words.len(),
            });
        }
        let n_valid_tail = shape.inner() - WORD_BITS * (row_words - 1);
        let mask = tail_mask(n_valid_tail);
        for r in 0..shape.rows() {
            if words[(r + 1) * row_words - 1] & !mask != 0 {
                return Err(Error::InvalidArgument(format!(
                    "row {r} has set bits beyond the valid tail"
                )));
            }
        }
        Ok(Self {
            shape,
            words,
            row_words,
            n_valid_tail,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Words per innermost row.
    pub fn row_words(&self) -> usize {
        self.row_words
    }

    /// Meaningful bits in the final word of each row.
    pub fn n_valid_tail(&self) -> usize {
        self.n_valid_tail
    }

    /// Packed words of innermost row `r`.
    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.row_words..(r + 1) * self.row_words]
    }

    /// Element at flat row-major index `i` as `true` for +1.
    pub fn get(&self, i: usize) -> bool {
        let inner = self.shape.inner();
        let (r, j) = (i / inner, i % inner);
        let word = self.words[r * self.row_words + j / WORD_BITS];
        (word >> (j % WORD_BITS)) & 1 == 1
    }

    /// Number of +1 elements.
    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// Packs a tensor whose elements are all exactly -1 or +1.
pub fn bit_pack(t: &Tensor) -> Result<BitTensor> {
    let inner = t.shape().inner();
    let row_words = words_for(inner);
    let rows = t.shape().rows();
    let mut words = vec![0u64; rows * row_words];
    for (i, &v) in t.data().iter().enumerate() {
        let bit = if v == 1.0 {
            1u64
        } else if v == -1.0 {
            0
        } else {
            return Err(Error::NonBinaryValue { index: i, value: v });
        };
        let (r, j) = (i / inner, i % inner);
        words[r * row_words + j / WORD_BITS] |= bit << (j % WORD_BITS);
    }
    Ok(BitTensor {
        shape: t.shape().clone(),
        words,
        row_words,
        n_valid_tail: inner - WORD_BITS * (row_words - 1),
    })
}

/// Expands a packed tensor back to ±1 reals.
pub fn bit_unpack(b: &BitTensor) -> Tensor {
    let data = (0..b.shape.len())
        .map(|i| if b.get(i) { 1.0 } else { -1.0 })
        .collect();
    Tensor {
        shape: b.shape.clone(),
        data,
    }
}

/// Integer dot product of two packed ±1 vectors of `n` valid elements:
/// `2 * popcount(xnor(a, b)) - n`. Bits beyond `n` are ignored.
pub fn popcount_dot(a: &[u64], b: &[u64], n: usize) -> Result<i64> {
    if a.len() != b.len() || a.len() != words_for(n) {
        return Err(Error::LengthMismatch(format!(
            "{} and {} words for {n} bits",
            a.len(),
            b.len()
        )));
    }
    Ok(popcount_dot_unchecked(a, b, n))
}

/// [`popcount_dot`] without length validation, for kernel inner loops.
#[inline]
pub(crate) fn popcount_dot_unchecked(a: &[u64], b: &[u64], n: usize) -> i64 {
    if n == 0 {
        return 0;
    }
    let last = a.len() - 1;
    let mut matches = 0u32;
    for i in 0..last {
        matches += (!(a[i] ^ b[i])).count_ones();
    }
    // xnor turns zero padding into ones, so mask after the xnor
    let tail = n - WORD_BITS * last;
    matches += (!(a[last] ^ b[last]) & tail_mask(tail)).count_ones();
    2 * matches as i64 - n as i64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_bad_dims() {
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[1, 2, 3, 4, 5]).is_err());
        assert!(Shape::new(&[3, 0]).is_err());
        assert!(Shape::new(&[usize::MAX, 2]).is_err());
        assert_eq!(Shape::new(&[2, 3, 4]).unwrap().len(), 24);
    }

    #[test]
    fn pack_lsb_first() {
        let t = Tensor::new(&[4], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let b = bit_pack(&t).unwrap();
        assert_eq!(b.words(), &[0b0101]);
        assert_eq!(b.n_valid_tail(), 4);
        assert_eq!(bit_unpack(&b), t);
    }

    #[test]
    fn pack_hundred_ones() {
        let t = Tensor::full(&[100], 1.0).unwrap();
        let b = bit_pack(&t).unwrap();
        assert_eq!(b.words().len(), 2);
        assert_eq!(b.words()[0], u64::MAX);
        assert_eq!(b.n_valid_tail(), 36);
        assert_eq!(b.words()[1], (1u64 << 36) - 1);
        assert_eq!(b.words()[1] >> 36, 0);
    }

    #[test]
    fn unpack_zero_bits_is_minus_one() {
        let b = BitTensor::from_words(&[3, 5], vec![0, 0, 0]).unwrap();
        assert!(bit_unpack(&b).data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn pack_rejects_non_binary() {
        let t = Tensor::new(&[3], vec![1.0, 0.0, -1.0]).unwrap();
        assert!(matches!(
            bit_pack(&t),
            Err(Error::NonBinaryValue { index: 1, .. })
        ));
    }

    #[test]
    fn from_words_rejects_dirty_tail() {
        assert!(BitTensor::from_words(&[4], vec![1 << 4]).is_err());
    }

    #[test]
    fn popcount_dot_small_cases() {
        let a = bit_pack(&Tensor::new(&[3], vec![1.0, -1.0, 1.0]).unwrap()).unwrap();
        let b = bit_pack(&Tensor::new(&[3], vec![1.0, 1.0, -1.0]).unwrap()).unwrap();
        assert_eq!(popcount_dot(a.words(), b.words(), 3).unwrap(), -1);
        let ones = [u64::MAX];
        assert_eq!(popcount_dot(&ones, &ones, 64).unwrap(), 64);
        assert!(matches!(
            popcount_dot(&[0, 0], &[0], 70),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn exhaustive_round_trip_short_vectors() {
        for n in 1..=12usize {
            for pattern in 0u32..(1 << n) {
                let data: Vec<f64> = (0..n)
                    .map(|i| if pattern >> i & 1 == 1 { 1.0 } else { -1.0 })
                    .collect();
                let t = Tensor::new(&[n], data).unwrap();
                let b = bit_pack(&t).unwrap();
                assert_eq!(b.words()[0], pattern as u64);
                assert_eq!(bit_unpack(&b), t);
            }
        }
    }

    #[test]
    fn hwc_round_trip() {
        let t = Tensor::from_fn(&[3, 2, 4], |i| i as f64).unwrap();
        assert_eq!(t.chw_to_hwc().unwrap().hwc_to_chw().unwrap(), t);
    }
}
