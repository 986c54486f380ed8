//! Fixed-point encoding of reals into the ring Z_{2^L} and exact two's-complement
//! tensor arithmetic.
//!
//! Ring words are stored in `u64` and always kept reduced mod 2^L. Arithmetic is
//! carried out mod 2^64 and masked afterwards, which is exact because 2^L divides 2^64.

use thiserror::Error;

use crate::real::Real;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FixedError {
    #[error("invalid fixed-point configuration: L={total_bits}, f={frac_bits}")]
    InvalidConfig { total_bits: u32, frac_bits: u32 },
    #[error("value {value} at index {index} is outside the representable range")]
    EncodeOverflow { index: usize, value: f64 },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed wire data: {0}")]
    Wire(String),
}

/// Bit width `L` of the ring and number of fractional bits `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedConfig {
    total_bits: u32,
    frac_bits: u32,
}

impl Default for FixedConfig {
    fn default() -> Self {
        FixedConfig {
            total_bits: 64,
            frac_bits: 16,
        }
    }
}

impl FixedConfig {
    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self, FixedError> {
        if !(8..=64).contains(&total_bits) || frac_bits + 2 > total_bits {
            return Err(FixedError::InvalidConfig {
                total_bits,
                frac_bits,
            });
        }
        Ok(FixedConfig {
            total_bits,
            frac_bits,
        })
    }

    /// Integer-only ring of any width in `2..=64`, for exercising protocols
    /// on small rings; encoding at such widths carries no fraction.
    pub fn ring(total_bits: u32) -> Result<Self, FixedError> {
        if !(2..=64).contains(&total_bits) {
            return Err(FixedError::InvalidConfig {
                total_bits,
                frac_bits: 0,
            });
        }
        Ok(FixedConfig {
            total_bits,
            frac_bits: 0,
        })
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn mask(&self) -> u64 {
        ring_mask(self.total_bits)
    }

    /// Bytes per word on the wire: ceil(L/8).
    pub fn word_bytes(&self) -> usize {
        self.total_bits.div_ceil(8) as usize
    }

    /// Resolution 2^-f.
    pub fn ulp(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn max_value(&self) -> f64 {
        ((self.total_bits - 1 - self.frac_bits) as f64).exp2() - self.ulp()
    }

    pub fn min_value(&self) -> f64 {
        -((self.total_bits - 1 - self.frac_bits) as f64).exp2()
    }

    pub fn wrap(&self, w: u64) -> u64 {
        w & self.mask()
    }

    pub fn to_signed(&self, w: u64) -> i64 {
        to_signed(w, self.total_bits)
    }

    pub fn from_signed(&self, v: i64) -> u64 {
        (v as u64) & self.mask()
    }

    /// Rounds half away from zero.
    pub fn encode_scalar(&self, x: f64) -> Result<u64, FixedError> {
        self.encode_at(0, x)
    }

    fn encode_at(&self, index: usize, x: f64) -> Result<u64, FixedError> {
        if !x.is_finite() {
            return Err(FixedError::NonFinite { index });
        }
        let scaled = (x * (self.frac_bits as f64).exp2()).round();
        let limit = ((self.total_bits - 1) as f64).exp2();
        if scaled < -limit || scaled >= limit {
            return Err(FixedError::EncodeOverflow { index, value: x });
        }
        Ok(self.from_signed(scaled as i64))
    }

    pub fn decode_scalar(&self, w: u64) -> f64 {
        self.to_signed(w) as f64 * self.ulp()
    }
}

pub fn ring_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Sign-extends the low `bits` bits of `w`.
pub fn to_signed(w: u64, bits: u32) -> i64 {
    let shift = 64 - bits;
    ((w << shift) as i64) >> shift
}

/// The bilinear product used by multiplication triples and public-weight layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProductOp {
    Elementwise,
    /// `[m, k] x [k, n] -> [m, n]`
    Matmul,
    /// Input `[N, C, H, W]` (or `[C, H, W]`) against kernel `[O, C, kh, kw]`.
    Conv2d { stride: usize, padding: usize },
}

impl ProductOp {
    pub fn output_shape(&self, a: &[usize], b: &[usize]) -> Result<Vec<usize>, FixedError> {
        match *self {
            ProductOp::Elementwise => {
                if a != b {
                    return Err(FixedError::Shape(format!(
                        "elementwise operands {a:?} and {b:?}"
                    )));
                }
                Ok(a.to_vec())
            }
            ProductOp::Matmul => {
                if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                    return Err(FixedError::Shape(format!("matmul operands {a:?} and {b:?}")));
                }
                Ok(vec![a[0], b[1]])
            }
            ProductOp::Conv2d { stride, padding } => {
                let (batched, c, h, w) = match a.len() {
                    3 => (None, a[0], a[1], a[2]),
                    4 => (Some(a[0]), a[1], a[2], a[3]),
                    _ => return Err(FixedError::Shape(format!("conv2d input {a:?}"))),
                };
                if b.len() != 4 || b[1] != c || stride == 0 {
                    return Err(FixedError::Shape(format!(
                        "conv2d input {a:?} against kernel {b:?}"
                    )));
                }
                let (kh, kw) = (b[2], b[3]);
                if h + 2 * padding < kh || w + 2 * padding < kw {
                    return Err(FixedError::Shape(format!(
                        "conv2d kernel {b:?} larger than padded input {a:?}"
                    )));
                }
                let oh = (h + 2 * padding - kh) / stride + 1;
                let ow = (w + 2 * padding - kw) / stride + 1;
                Ok(match batched {
                    Some(n) => vec![n, b[0], oh, ow],
                    None => vec![b[0], oh, ow],
                })
            }
        }
    }
}

/// Dense tensor of L-bit two's-complement ring elements.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RingTensor {
    shape: Vec<usize>,
    bits: u32,
    data: Vec<u64>,
}

impl RingTensor {
    /// Words are reduced mod 2^bits on construction.
    pub fn new(shape: &[usize], bits: u32, mut data: Vec<u64>) -> Result<Self, FixedError> {
        if numel(shape) != data.len() {
            return Err(FixedError::Shape(format!(
                "{} words for shape {shape:?}",
                data.len()
            )));
        }
        let mask = ring_mask(bits);
        data.iter_mut().for_each(|w| *w &= mask);
        Ok(RingTensor {
            shape: shape.to_vec(),
            bits,
            data,
        })
    }

    pub fn zeros(shape: &[usize], bits: u32) -> Self {
        RingTensor {
            shape: shape.to_vec(),
            bits,
            data: vec![0; numel(shape)],
        }
    }

    pub fn filled(shape: &[usize], bits: u32, word: u64) -> Self {
        RingTensor {
            shape: shape.to_vec(),
            bits,
            data: vec![word & ring_mask(bits); numel(shape)],
        }
    }

    pub fn from_signed(shape: &[usize], bits: u32, values: &[i64]) -> Result<Self, FixedError> {
        Self::new(shape, bits, values.iter().map(|&v| v as u64).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mask(&self) -> u64 {
        ring_mask(self.bits)
    }

    pub fn to_signed(&self) -> Vec<i64> {
        self.data.iter().map(|&w| to_signed(w, self.bits)).collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, FixedError> {
        if numel(shape) != self.data.len() {
            return Err(FixedError::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(u64) -> u64) -> Self {
        let mask = self.mask();
        RingTensor {
            shape: self.shape.clone(),
            bits: self.bits,
            data: self.data.iter().map(|&w| f(w) & mask).collect(),
        }
    }

    /// Elementwise combination. Panics on shape or width mismatch.
    pub fn zip_map(&self, other: &RingTensor, f: impl Fn(u64, u64) -> u64) -> Self {
        assert_eq!(self.shape, other.shape, "ring tensor shape mismatch");
        assert_eq!(self.bits, other.bits, "ring width mismatch");
        let mask = self.mask();
        RingTensor {
            shape: self.shape.clone(),
            bits: self.bits,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b) & mask)
                .collect(),
        }
    }

    pub fn add(&self, other: &RingTensor) -> Self {
        self.zip_map(other, u64::wrapping_add)
    }

    pub fn sub(&self, other: &RingTensor) -> Self {
        self.zip_map(other, u64::wrapping_sub)
    }

    pub fn mul(&self, other: &RingTensor) -> Self {
        self.zip_map(other, u64::wrapping_mul)
    }

    pub fn neg(&self) -> Self {
        self.map(u64::wrapping_neg)
    }

    pub fn scale(&self, k: u64) -> Self {
        self.map(|w| w.wrapping_mul(k))
    }

    pub fn xor(&self, other: &RingTensor) -> Self {
        self.zip_map(other, |a, b| a ^ b)
    }

    pub fn and(&self, other: &RingTensor) -> Self {
        self.zip_map(other, |a, b| a & b)
    }

    pub fn shl(&self, k: u32) -> Self {
        self.map(|w| if k >= 64 { 0 } else { w << k })
    }

    pub fn shr_logical(&self, k: u32) -> Self {
        self.map(|w| if k >= 64 { 0 } else { w >> k })
    }

    /// Arithmetic right shift of the sign-extended value, re-wrapped to L bits.
    pub fn shr_arith(&self, k: u32) -> Self {
        let bits = self.bits;
        self.map(|w| (to_signed(w, bits) >> k.min(63)) as u64)
    }

    /// Bilinear product `op(self, rhs)`, exact mod 2^L.
    pub fn product(&self, rhs: &RingTensor, op: ProductOp) -> Result<Self, FixedError> {
        if self.bits != rhs.bits {
            return Err(FixedError::Shape("ring width mismatch".into()));
        }
        let out_shape = op.output_shape(&self.shape, &rhs.shape)?;
        let data = match op {
            ProductOp::Elementwise => {
                return Ok(self.mul(rhs));
            }
            ProductOp::Matmul => {
                let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
                let mut out = vec![0u64; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let a = self.data[i * k + p];
                        if a == 0 {
                            continue;
                        }
                        let row = &rhs.data[p * n..(p + 1) * n];
                        let dst = &mut out[i * n..(i + 1) * n];
                        for (d, &b) in dst.iter_mut().zip(row) {
                            *d = d.wrapping_add(a.wrapping_mul(b));
                        }
                    }
                }
                out
            }
            ProductOp::Conv2d { stride, padding } => conv2d_words(
                &self.data,
                &self.shape,
                &rhs.data,
                &rhs.shape,
                &out_shape,
                stride,
                padding,
            ),
        };
        RingTensor::new(&out_shape, self.bits, data)
    }

    /// Sum over `k x k` windows with stride `k` on `[N, C, H, W]`.
    pub fn window_sum(&self, k: usize) -> Result<Self, FixedError> {
        if self.shape.len() != 4 || k == 0 || self.shape[2] % k != 0 || self.shape[3] % k != 0 {
            return Err(FixedError::Shape(format!(
                "window sum {k} on {:?}",
                self.shape
            )));
        }
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![0u64; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    let dst = &mut out[plane * oh * ow + (y / k) * ow + x / k];
                    *dst = dst.wrapping_add(self.data[plane * h * w + y * w + x]);
                }
            }
        }
        RingTensor::new(&[n, c, oh, ow], self.bits, out)
    }

    /// Appends `rank:u32, dims:u32..., words` (little-endian, ceil(L/8) bytes per word).
    pub fn write_wire(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let nbytes = self.bits.div_ceil(8) as usize;
        for &w in &self.data {
            out.extend_from_slice(&w.to_le_bytes()[..nbytes]);
        }
    }

    pub fn wire_len(&self) -> usize {
        4 + 4 * self.shape.len() + self.data.len() * self.bits.div_ceil(8) as usize
    }

    /// Parses one tensor from the front of `bytes`, returning it and the bytes consumed.
    pub fn read_wire(bytes: &[u8], bits: u32) -> Result<(Self, usize), FixedError> {
        let mut pos = 0usize;
        let take_u32 = |pos: &mut usize| -> Result<u32, FixedError> {
            let s = bytes
                .get(*pos..*pos + 4)
                .ok_or_else(|| FixedError::Wire("truncated tensor header".into()))?;
            *pos += 4;
            Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")))
        };
        let rank = take_u32(&mut pos)? as usize;
        if rank > 8 {
            return Err(FixedError::Wire(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FixedError::Wire("tensor size overflow".into()))?;
        let nbytes = bits.div_ceil(8) as usize;
        let body = bytes
            .get(pos..pos + count * nbytes)
            .ok_or_else(|| FixedError::Wire("truncated tensor payload".into()))?;
        let data = body
            .chunks_exact(nbytes)
            .map(|c| {
                let mut buf = [0u8; 8];
                buf[..nbytes].copy_from_slice(c);
                u64::from_le_bytes(buf)
            })
            .collect();
        pos += count * nbytes;
        Ok((RingTensor::new(&shape, bits, data)?, pos))
    }
}

fn conv2d_words(
    x: &[u64],
    xs: &[usize],
    k: &[u64],
    ks: &[usize],
    out_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Vec<u64> {
    let (n, c, h, w) = if xs.len() == 4 {
        (xs[0], xs[1], xs[2], xs[3])
    } else {
        (1, xs[0], xs[1], xs[2])
    };
    let (o, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
    let mut out = vec![0u64; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0u64;
                    for ic in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = k[((oc * c + ic) * kh + ky) * kw + kx];
                                acc = acc.wrapping_add(xv.wrapping_mul(kv));
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Encodes each element as round(x * 2^f) mod 2^L.
pub fn encode<T: Real>(x: &Tensor<T>, cfg: &FixedConfig) -> Result<RingTensor, FixedError> {
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| cfg.encode_at(i, v.as_f64()))
        .collect::<Result<Vec<_>, _>>()?;
    RingTensor::new(x.shape(), cfg.total_bits, data)
}

pub fn decode<T: Real>(r: &RingTensor, cfg: &FixedConfig) -> Tensor<T> {
    Tensor::from_vec(
        r.shape(),
        r.data()
            .iter()
            .map(|&w| T::of(cfg.decode_scalar(w)))
            .collect(),
    )
}

/// Rescales a product carrying scale 2f back to scale f.
pub fn truncate(r: &RingTensor, cfg: &FixedConfig) -> RingTensor {
    r.shr_arith(cfg.frac_bits)
}
