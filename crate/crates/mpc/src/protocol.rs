//! Online two-party operations on additively shared fixed-point tensors.
//!
//! Each party drives its own [`Session`]; the two sessions must issue the
//! same sequence of operations. Model weights and polynomial coefficients are
//! public, activations are secret shared.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use arp_core::dapa::ChannelPolys;
use arp_core::{FixedConfig, FixedError, ProductOp, RingTensor, Tensor};
use rand::RngCore;
use thiserror::Error;

use crate::dealer::{DealerError, Preprocessing};
use crate::transport::{Channel, PartyId, Phase, TransportError};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Dealer(#[from] DealerError),
    #[error("shape: {0}")]
    Shape(String),
    #[error("scale mismatch: {0} vs {1}")]
    Scale(u32, u32),
    #[error("correlated randomness #{0} used twice")]
    Reuse(u64),
    #[error(transparent)]
    Fixed(#[from] FixedError),
}

/// One party's additive share; the logical value is the ring sum of both
/// parties' payloads, carrying `scale` fractional bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareTensor {
    pub party: PartyId,
    pub payload: RingTensor,
    pub scale: u32,
}

impl ShareTensor {
    pub fn shape(&self) -> &[usize] {
        self.payload.shape()
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    fn with(&self, payload: RingTensor, scale: u32) -> ShareTensor {
        ShareTensor {
            party: self.party,
            payload,
            scale,
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<ShareTensor, ProtocolError> {
        Ok(ShareTensor {
            payload: self.payload.reshape(shape)?,
            ..self
        })
    }
}

/// One party's XOR share of L bit planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryShareTensor {
    pub party: PartyId,
    pub payload: RingTensor,
}

/// Local truncation of a share by `shift` bits: party 0 shifts its share,
/// party 1 shifts the negation of its share and negates back. The opened
/// result is off by less than one unit in the last place, except with
/// probability about `|x| / 2^L` when the shares wrap.
/// Worst-case deviation of each op from plaintext evaluation on the encoded
/// operands, in ULPs, excluding the truncation wrap event.
pub mod ulp_tolerance {
    pub const LIN_COMBINE: f64 = 1.0;
    pub const MUL_PUBLIC: f64 = 1.0;
    pub const MUL_BEAVER: f64 = 1.0;
    pub const SQUARE: f64 = 1.0;
    pub const B2A: f64 = 0.0;
    pub const RELU: f64 = 0.0;
    /// Plus `|c2|` times [`SQUARE`] from the truncated square.
    pub const POLY: f64 = 1.0;
}

pub fn truncate_share(party: PartyId, x: &RingTensor, shift: u32) -> RingTensor {
    if shift == 0 {
        return x.clone();
    }
    match party {
        PartyId::P0 => x.shr_arith(shift),
        PartyId::P1 => x.neg().shr_arith(shift).neg(),
    }
}

fn gather(x: &RingTensor, idx: &[usize]) -> RingTensor {
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    RingTensor::new(&[idx.len()], x.bits(), data).expect("gathered length")
}

fn scatter(into: &mut [u64], idx: &[usize], from: &RingTensor) {
    for (&i, &w) in idx.iter().zip(from.data()) {
        into[i] = w;
    }
}

pub struct Session<P> {
    party: PartyId,
    cfg: FixedConfig,
    chan: Channel,
    prep: P,
    used: HashSet<u64>,
    times: [Duration; 5],
    mark: Instant,
}

impl<P: Preprocessing> Session<P> {
    pub fn new(chan: Channel, prep: P, cfg: FixedConfig) -> Self {
        assert_eq!(chan.bits(), cfg.total_bits(), "channel ring width differs from config");
        Session {
            party: chan.party(),
            cfg,
            chan,
            prep,
            used: HashSet::new(),
            times: [Duration::ZERO; 5],
            mark: Instant::now(),
        }
    }

    pub fn party(&self) -> PartyId {
        self.party
    }

    pub fn config(&self) -> FixedConfig {
        self.cfg
    }

    pub fn channel(&self) -> &Channel {
        &self.chan
    }

    pub fn channel_mut(&mut self) -> &mut Channel {
        &mut self.chan
    }

    pub fn prep(&self) -> &P {
        &self.prep
    }

    pub fn into_parts(self) -> (Channel, P) {
        (self.chan, self.prep)
    }

    fn is_p0(&self) -> bool {
        self.party == PartyId::P0
    }

    fn claim(&mut self, serial: u64) -> Result<(), ProtocolError> {
        if self.used.insert(serial) {
            Ok(())
        } else {
            Err(ProtocolError::Reuse(serial))
        }
    }

    fn switch(&mut self, phase: Phase) -> Phase {
        let now = Instant::now();
        self.times[self.chan.phase().index()] += now - self.mark;
        self.mark = now;
        self.chan.set_phase(phase)
    }

    /// Runs `f` with traffic and wall time attributed to `phase`. Nested
    /// phases are timed exclusively.
    pub fn in_phase<R>(&mut self, phase: Phase, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = self.switch(phase);
        let out = f(self);
        self.switch(prev);
        out
    }

    /// Wall time spent in each phase so far, indexed like [`Phase::ALL`].
    pub fn phase_times(&self) -> [Duration; 5] {
        let mut t = self.times;
        t[self.chan.phase().index()] += self.mark.elapsed();
        t
    }

    fn share(&self, payload: RingTensor, scale: u32) -> ShareTensor {
        ShareTensor {
            party: self.party,
            payload,
            scale,
        }
    }

    /// Share of a public constant: party 0 holds the value, party 1 zero.
    pub fn constant(&self, value: &RingTensor, scale: u32) -> ShareTensor {
        let payload = if self.is_p0() {
            value.clone()
        } else {
            RingTensor::zeros(value.shape(), value.bits())
        };
        self.share(payload, scale)
    }

    /// Party 0 secret-shares `value` (encoded at scale f) by sending a uniform
    /// mask to party 1. Party 1 passes `None`.
    pub fn input(&mut self, value: Option<&RingTensor>, shape: &[usize], rng: &mut impl RngCore) -> Result<ShareTensor, ProtocolError> {
        let f = self.cfg.frac_bits();
        self.in_phase(Phase::Input, |s| {
            if s.is_p0() {
                let v = value.ok_or_else(|| ProtocolError::Shape("party 0 must supply the input".into()))?;
                if v.shape() != shape {
                    return Err(ProtocolError::Shape(format!("input {:?} declared {shape:?}", v.shape())));
                }
                let r = RingTensor::new(shape, s.cfg.total_bits(), (0..v.len()).map(|_| rng.next_u64()).collect())?;
                s.chan.send_many(&[&r])?;
                Ok(s.share(v.sub(&r), f))
            } else {
                let r = s.chan.recv_many(&[shape])?.remove(0);
                Ok(s.share(r, f))
            }
        })
    }

    /// Both parties learn the value. One round.
    pub fn open(&mut self, x: &ShareTensor) -> Result<RingTensor, ProtocolError> {
        let peer = self.chan.exchange(&x.payload)?;
        Ok(x.payload.add(&peer))
    }

    /// Only `to` learns the value; the other party gets `None`.
    pub fn reveal_to(&mut self, x: &ShareTensor, to: PartyId) -> Result<Option<RingTensor>, ProtocolError> {
        self.in_phase(Phase::Output, |s| {
            if s.party == to {
                let peer = s.chan.recv_many(&[x.shape()])?.remove(0);
                Ok(Some(x.payload.add(&peer)))
            } else {
                s.chan.send_many(&[&x.payload])?;
                Ok(None)
            }
        })
    }

    fn same(x: &ShareTensor, y: &ShareTensor) -> Result<(), ProtocolError> {
        if x.shape() != y.shape() {
            return Err(ProtocolError::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        if x.scale != y.scale {
            return Err(ProtocolError::Scale(x.scale, y.scale));
        }
        Ok(())
    }

    pub fn add(&self, x: &ShareTensor, y: &ShareTensor) -> Result<ShareTensor, ProtocolError> {
        Self::same(x, y)?;
        Ok(x.with(x.payload.add(&y.payload), x.scale))
    }

    pub fn sub(&self, x: &ShareTensor, y: &ShareTensor) -> Result<ShareTensor, ProtocolError> {
        Self::same(x, y)?;
        Ok(x.with(x.payload.sub(&y.payload), x.scale))
    }

    /// Adds a public tensor encoded at the share's scale.
    pub fn add_public(&self, x: &ShareTensor, c: &RingTensor) -> Result<ShareTensor, ProtocolError> {
        if x.shape() != c.shape() {
            return Err(ProtocolError::Shape(format!("{:?} plus public {:?}", x.shape(), c.shape())));
        }
        Ok(if self.is_p0() {
            x.with(x.payload.add(c), x.scale)
        } else {
            x.clone()
        })
    }

    /// Adds a public per-channel vector along axis 1.
    pub fn add_channel_bias(&self, x: &ShareTensor, bias: &RingTensor) -> Result<ShareTensor, ProtocolError> {
        let shape = x.shape();
        if shape.len() < 2 || bias.shape() != [shape[1]] {
            return Err(ProtocolError::Shape(format!("bias {:?} for {:?}", bias.shape(), shape)));
        }
        if !self.is_p0() {
            return Ok(x.clone());
        }
        let inner: usize = shape[2..].iter().product();
        let channels = shape[1];
        let mut data = x.payload.data().to_vec();
        for (i, w) in data.iter_mut().enumerate() {
            *w = w.wrapping_add(bias.data()[(i / inner) % channels]);
        }
        Ok(x.with(RingTensor::new(shape, x.payload.bits(), data)?, x.scale))
    }

    /// Truncates until the scale is back at f.
    pub fn rescale(&self, x: ShareTensor) -> ShareTensor {
        let f = self.cfg.frac_bits();
        if x.scale <= f {
            return x;
        }
        let payload = truncate_share(self.party, &x.payload, x.scale - f);
        x.with(payload, f)
    }

    /// `a * X + Y` with `a` public, encoded at scale f. Local.
    pub fn lin_combine(&self, a: f64, x: &ShareTensor, y: &ShareTensor) -> Result<ShareTensor, ProtocolError> {
        Self::same(x, y)?;
        let aw = self.cfg.encode_scalar(a)?;
        let f = self.cfg.frac_bits();
        let ax = truncate_share(self.party, &x.payload.scale(aw), f);
        Ok(x.with(ax.add(&y.payload), x.scale))
    }

    /// `op(X, W)` with `W` public at scale `w_scale`, then rescaled. Local.
    pub fn mul_public(&self, x: &ShareTensor, w: &RingTensor, w_scale: u32, op: ProductOp) -> Result<ShareTensor, ProtocolError> {
        let p = x.payload.product(w, op)?;
        Ok(self.rescale(x.with(p, x.scale + w_scale)))
    }

    /// Mean over non-overlapping `k x k` windows of `[N, C, H, W]`. Local.
    pub fn avg_pool(&self, x: &ShareTensor, k: usize) -> Result<ShareTensor, ProtocolError> {
        let sums = x.payload.window_sum(k)?;
        let inv = self.cfg.encode_scalar(1.0 / (k * k) as f64)?;
        Ok(self.rescale(x.with(sums.scale(inv), x.scale + self.cfg.frac_bits())))
    }

    /// Beaver multiplication: one round opening `E = X - A` and `F = Y - B`
    /// together, then `R_i = -i E*F + X_i*F + E*Y_i + Z_i` and rescaling.
    pub fn mul_beaver(&mut self, x: &ShareTensor, y: &ShareTensor, op: ProductOp) -> Result<ShareTensor, ProtocolError> {
        let t = self.prep.triple(x.shape(), y.shape(), op)?;
        self.claim(t.serial)?;
        let e_i = x.payload.sub(&t.a);
        let f_i = y.payload.sub(&t.b);
        let peer = self.chan.exchange_many(&[&e_i, &f_i])?;
        let e = e_i.add(&peer[0]);
        let f = f_i.add(&peer[1]);
        let mut r = x
            .payload
            .product(&f, op)?
            .add(&e.product(&y.payload, op)?)
            .add(&t.z);
        if self.is_p0() {
            r = r.sub(&e.product(&f, op)?);
        }
        Ok(self.rescale(x.with(r, x.scale + y.scale)))
    }

    /// Squaring with one opened tensor: `R_i = Z_i + 2 E*A_i + [i = 0] E*E`.
    pub fn square(&mut self, x: &ShareTensor) -> Result<ShareTensor, ProtocolError> {
        let p = self.prep.square_pair(x.shape())?;
        self.claim(p.serial)?;
        let e_i = x.payload.sub(&p.a);
        let e = e_i.add(&self.chan.exchange(&e_i)?);
        let mut r = p.z.add(&e.mul(&p.a).scale(2));
        if self.is_p0() {
            r = r.add(&e.mul(&e));
        }
        Ok(self.rescale(x.with(r, 2 * x.scale)))
    }

    /// Bitwise AND of XOR-shared pairs, all opened in one round.
    pub fn and_many(&mut self, pairs: &[(&RingTensor, &RingTensor)]) -> Result<Vec<RingTensor>, ProtocolError> {
        let mut triples = Vec::with_capacity(pairs.len());
        let mut masked = Vec::with_capacity(2 * pairs.len());
        for (x, y) in pairs {
            let t = self.prep.and_triple(x.shape())?;
            self.claim(t.serial)?;
            masked.push(x.xor(&t.a));
            masked.push(y.xor(&t.b));
            triples.push(t);
        }
        let peer = self.chan.exchange_many(&masked.iter().collect::<Vec<_>>())?;
        Ok(triples
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let d = masked[2 * k].xor(&peer[2 * k]);
                let e = masked[2 * k + 1].xor(&peer[2 * k + 1]);
                let mut z = t.c.xor(&d.and(&t.b)).xor(&e.and(&t.a));
                if self.is_p0() {
                    z = z.xor(&d.and(&e));
                }
                z
            })
            .collect())
    }

    /// Arithmetic to binary sharing: a Kogge-Stone adder over XOR shares of
    /// the two parties' summands. `1 + ceil(log2 L)` rounds.
    pub fn a2b(&mut self, x: &ShareTensor) -> Result<BinaryShareTensor, ProtocolError> {
        let zero = RingTensor::zeros(x.shape(), x.payload.bits());
        let (a, b) = if self.is_p0() {
            (x.payload.clone(), zero)
        } else {
            (zero, x.payload.clone())
        };
        let p0 = a.xor(&b);
        let mut g = self.and_many(&[(&a, &b)])?.remove(0);
        let mut p = p0.clone();
        let bits = self.cfg.total_bits();
        let mut k = 1u32;
        while k < bits {
            let gs = g.shl(k);
            if 2 * k < bits {
                let ps = p.shl(k);
                let out = self.and_many(&[(&p, &gs), (&p, &ps)])?;
                g = g.xor(&out[0]);
                p = out[1].clone();
            } else {
                g = g.xor(&self.and_many(&[(&p, &gs)])?[0]);
            }
            k *= 2;
        }
        Ok(BinaryShareTensor {
            party: self.party,
            payload: p0.xor(&g.shl(1)),
        })
    }

    /// Sign bit plane, moved to bit 0. Local.
    pub fn msb(&self, xb: &BinaryShareTensor) -> BinaryShareTensor {
        let top = self.cfg.total_bits() - 1;
        BinaryShareTensor {
            party: xb.party,
            payload: xb.payload.map(|w| (w >> top) & 1),
        }
    }

    /// XOR-shared bit to arithmetic share at scale 0 via `b0 + b1 - 2 b0 b1`.
    pub fn b2a(&mut self, b: &BinaryShareTensor) -> Result<ShareTensor, ProtocolError> {
        let bit = b.payload.map(|w| w & 1);
        let zero = RingTensor::zeros(bit.shape(), bit.bits());
        let (x, y) = if self.is_p0() {
            (bit.clone(), zero)
        } else {
            (zero, bit.clone())
        };
        let prod = self.mul_beaver(&self.share(x, 0), &self.share(y, 0), ProductOp::Elementwise)?;
        Ok(self.share(bit.sub(&prod.payload.scale(2)), 0))
    }

    /// Shares of `[x < 0]` at scale 0. Exact.
    pub fn ltz(&mut self, x: &ShareTensor) -> Result<ShareTensor, ProtocolError> {
        self.in_phase(Phase::Comparison, |s| {
            let xb = s.a2b(x)?;
            let sign = s.msb(&xb);
            s.b2a(&sign)
        })
    }

    /// `(1 - [x < 0]) * x`.
    pub fn relu(&mut self, x: &ShareTensor) -> Result<ShareTensor, ProtocolError> {
        self.in_phase(Phase::Comparison, |s| {
            let b = s.ltz(x)?;
            let ones = RingTensor::filled(x.shape(), x.payload.bits(), 1);
            let keep = s.constant(&ones, 0);
            let keep = s.sub(&keep, &b)?;
            s.mul_beaver(&keep, x, ProductOp::Elementwise)
        })
    }

    /// `c2 x^2 + c1 x + c0` with per-element public coefficient words at
    /// scale f; `x` is a flat share at scale f. One square, one truncation
    /// of the folded sum; skips the square when every `c2` is zero.
    fn poly_elems(&mut self, x: &ShareTensor, c: [&[u64]; 3]) -> Result<ShareTensor, ProtocolError> {
        let f = self.cfg.frac_bits();
        if x.scale != f {
            return Err(ProtocolError::Scale(x.scale, f));
        }
        let n = x.len();
        let mut acc = vec![0u64; n];
        let xs = x.payload.data();
        for i in 0..n {
            acc[i] = c[1][i].wrapping_mul(xs[i]);
        }
        if c[2].iter().any(|&w| w != 0) {
            let sq = self.square(x)?;
            for (i, a) in acc.iter_mut().enumerate() {
                *a = a.wrapping_add(c[2][i].wrapping_mul(sq.payload.data()[i]));
            }
        }
        if self.is_p0() {
            for (a, &c0) in acc.iter_mut().zip(c[0]) {
                *a = a.wrapping_add(c0 << f);
            }
        }
        let acc = RingTensor::new(x.shape(), x.payload.bits(), acc)?;
        Ok(self.rescale(x.with(acc, 2 * f)))
    }

    fn coeff_words(&self, polys: &ChannelPolys<f64>) -> Result<Vec<[u64; 3]>, ProtocolError> {
        if polys.max_degree() > 2 {
            return Err(ProtocolError::Shape(format!(
                "secure evaluation supports degree <= 2, got {}",
                polys.max_degree()
            )));
        }
        polys
            .rows()
            .iter()
            .map(|p| {
                let get = |i: usize| if i < p.coeffs().len() { p.get(i) } else { 0.0 };
                Ok([
                    self.cfg.encode_scalar(get(0))?,
                    self.cfg.encode_scalar(get(1))?,
                    self.cfg.encode_scalar(get(2))?,
                ])
            })
            .collect()
    }

    fn channel_layout(x: &ShareTensor, channels: usize) -> Result<usize, ProtocolError> {
        let s = x.shape();
        if s.len() < 2 || s[1] != channels {
            return Err(ProtocolError::Shape(format!("{channels} coefficient rows for activation {s:?}")));
        }
        Ok(s[2..].iter().product())
    }

    /// Per-channel quadratic on `[N, C, ...]`.
    pub fn dapa_eval(&mut self, x: &ShareTensor, polys: &ChannelPolys<f64>) -> Result<ShareTensor, ProtocolError> {
        let inner = Self::channel_layout(x, polys.channels())?;
        let words = self.coeff_words(polys)?;
        let ch = |i: usize| (i / inner) % polys.channels();
        let cols: Vec<Vec<u64>> = (0..3).map(|j| (0..x.len()).map(|i| words[ch(i)][j]).collect()).collect();
        let flat = x.clone().reshape(&[x.len()])?;
        self.in_phase(Phase::Polynomial, |s| {
            s.poly_elems(&flat, [&cols[0], &cols[1], &cols[2]])?
                .reshape(x.shape())
        })
    }

    /// Elements whose public mask bit is 1 go through one batched ReLU, the
    /// rest through one batched polynomial evaluation; results are scattered
    /// back in place. `mask` has the per-example shape `x.shape()[1..]`.
    pub fn hybrid_activation(&mut self, x: &ShareTensor, mask: &Tensor<u8>, polys: &ChannelPolys<f64>) -> Result<ShareTensor, ProtocolError> {
        if x.shape().len() < 2 || mask.shape() != &x.shape()[1..] {
            return Err(ProtocolError::Shape(format!("mask {:?} for activation {:?}", mask.shape(), x.shape())));
        }
        let inner = Self::channel_layout(x, polys.channels())?;
        let per = mask.len();
        let (mut on, mut off) = (Vec::new(), Vec::new());
        for i in 0..x.len() {
            if mask.data()[i % per] == 1 {
                on.push(i)
            } else {
                off.push(i)
            }
        }
        let mut out = x.payload.data().to_vec();
        if !on.is_empty() {
            let sub = x.with(gather(&x.payload, &on), x.scale);
            let r = self.relu(&sub)?;
            scatter(&mut out, &on, &r.payload);
        }
        if !off.is_empty() {
            let words = self.coeff_words(polys)?;
            let ch = |i: usize| (i / inner) % polys.channels();
            let cols: Vec<Vec<u64>> = (0..3).map(|j| off.iter().map(|&i| words[ch(i)][j]).collect()).collect();
            let sub = x.with(gather(&x.payload, &off), x.scale);
            let r = self.in_phase(Phase::Polynomial, |s| s.poly_elems(&sub, [&cols[0], &cols[1], &cols[2]]))?;
            scatter(&mut out, &off, &r.payload);
        }
        Ok(x.with(RingTensor::new(x.shape(), x.payload.bits(), out)?, x.scale))
    }
}
