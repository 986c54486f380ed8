//! Trusted dealer for correlated randomness, and the per-party tapes it fills.
//!
//! Everything the dealer emits is a function of its seed and the request
//! sequence. A [`Planner`] stands in for a tape during a dry run and records
//! exactly which requests an online computation will make.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use arp_core::{FixedConfig, ProductOp, RingTensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::transport::PartyId;

pub const TAPE_MAGIC: &[u8; 4] = b"ARPT";
pub const TAPE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DealerError {
    #[error("tape exhausted: needed {0}")]
    TapeExhausted(String),
    #[error("tape out of step: needed {wanted}, found {found}")]
    Mismatch { wanted: String, found: String },
    #[error("shape: {0}")]
    Shape(String),
    #[error("tape format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One unit of preprocessing an online computation asks for.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Request {
    Triple {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        op: ProductOp,
    },
    Square {
        shape: Vec<usize>,
    },
    And {
        shape: Vec<usize>,
    },
}

impl std::fmt::Display for Request {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Request::Triple { lhs, rhs, op } => write!(f, "{op:?} triple {lhs:?} x {rhs:?}"),
            Request::Square { shape } => write!(f, "square pair {shape:?}"),
            Request::And { shape } => write!(f, "AND triple {shape:?}"),
        }
    }
}

/// One party's shares of `A`, `B` and `Z = op(A, B)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeaverTriple {
    pub serial: u64,
    pub op: ProductOp,
    pub a: RingTensor,
    pub b: RingTensor,
    pub z: RingTensor,
}

/// One party's shares of `A` and `Z = A * A`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SquarePair {
    pub serial: u64,
    pub a: RingTensor,
    pub z: RingTensor,
}

/// One party's XOR shares of `a`, `b` and `c = a & b` over all L bit planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AndTriple {
    pub serial: u64,
    pub a: RingTensor,
    pub b: RingTensor,
    pub c: RingTensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Triple(BeaverTriple),
    Square(SquarePair),
    And(AndTriple),
}

impl Record {
    pub fn serial(&self) -> u64 {
        match self {
            Record::Triple(t) => t.serial,
            Record::Square(p) => p.serial,
            Record::And(t) => t.serial,
        }
    }

    pub fn request(&self) -> Request {
        match self {
            Record::Triple(t) => Request::Triple {
                lhs: t.a.shape().to_vec(),
                rhs: t.b.shape().to_vec(),
                op: t.op,
            },
            Record::Square(p) => Request::Square {
                shape: p.a.shape().to_vec(),
            },
            Record::And(t) => Request::And {
                shape: t.a.shape().to_vec(),
            },
        }
    }
}

pub struct Dealer {
    cfg: FixedConfig,
    rng: ChaCha20Rng,
    serial: u64,
}

impl Dealer {
    pub fn new(cfg: FixedConfig, seed: u64) -> Self {
        Dealer {
            cfg,
            rng: ChaCha20Rng::seed_from_u64(seed),
            serial: 0,
        }
    }

    pub fn config(&self) -> FixedConfig {
        self.cfg
    }

    fn uniform(&mut self, shape: &[usize]) -> RingTensor {
        let n = arp_core::numel(shape);
        let data = (0..n).map(|_| self.rng.next_u64()).collect();
        RingTensor::new(shape, self.cfg.total_bits(), data).expect("shape and data agree")
    }

    fn next_serial(&mut self) -> u64 {
        self.serial += 1;
        self.serial
    }

    /// Additive shares `(r, x - r)` with `r` uniform.
    pub fn gen_shares(&mut self, x: &RingTensor) -> (RingTensor, RingTensor) {
        let r = self.uniform(x.shape());
        let other = x.sub(&r);
        (r, other)
    }

    fn split(&mut self, x: &RingTensor) -> (RingTensor, RingTensor) {
        self.gen_shares(x)
    }

    fn split_xor(&mut self, x: &RingTensor) -> (RingTensor, RingTensor) {
        let r = self.uniform(x.shape());
        let other = x.xor(&r);
        (r, other)
    }

    pub fn gen_triple(&mut self, lhs: &[usize], rhs: &[usize], op: ProductOp) -> Result<(BeaverTriple, BeaverTriple), DealerError> {
        op.output_shape(lhs, rhs).map_err(|e| DealerError::Shape(e.to_string()))?;
        let a = self.uniform(lhs);
        let b = self.uniform(rhs);
        let z = a.product(&b, op).map_err(|e| DealerError::Shape(e.to_string()))?;
        let serial = self.next_serial();
        let (a0, a1) = self.split(&a);
        let (b0, b1) = self.split(&b);
        let (z0, z1) = self.split(&z);
        Ok((
            BeaverTriple {
                serial,
                op,
                a: a0,
                b: b0,
                z: z0,
            },
            BeaverTriple {
                serial,
                op,
                a: a1,
                b: b1,
                z: z1,
            },
        ))
    }

    pub fn gen_square_pair(&mut self, shape: &[usize]) -> (SquarePair, SquarePair) {
        let a = self.uniform(shape);
        let z = a.mul(&a);
        let serial = self.next_serial();
        let (a0, a1) = self.split(&a);
        let (z0, z1) = self.split(&z);
        (
            SquarePair { serial, a: a0, z: z0 },
            SquarePair { serial, a: a1, z: z1 },
        )
    }

    pub fn gen_and_triple(&mut self, shape: &[usize]) -> (AndTriple, AndTriple) {
        let a = self.uniform(shape);
        let b = self.uniform(shape);
        let c = a.and(&b);
        let serial = self.next_serial();
        let (a0, a1) = self.split_xor(&a);
        let (b0, b1) = self.split_xor(&b);
        let (c0, c1) = self.split_xor(&c);
        (
            AndTriple {
                serial,
                a: a0,
                b: b0,
                c: c0,
            },
            AndTriple {
                serial,
                a: a1,
                b: b1,
                c: c1,
            },
        )
    }

    pub fn deal_one(&mut self, req: &Request) -> Result<(Record, Record), DealerError> {
        Ok(match req {
            Request::Triple { lhs, rhs, op } => {
                let (t0, t1) = self.gen_triple(lhs, rhs, *op)?;
                (Record::Triple(t0), Record::Triple(t1))
            }
            Request::Square { shape } => {
                let (p0, p1) = self.gen_square_pair(shape);
                (Record::Square(p0), Record::Square(p1))
            }
            Request::And { shape } => {
                let (t0, t1) = self.gen_and_triple(shape);
                (Record::And(t0), Record::And(t1))
            }
        })
    }

    /// Fills both parties' tapes for a request sequence.
    pub fn deal(&mut self, requests: &[Request]) -> Result<(Tape, Tape), DealerError> {
        let mut t0 = Tape::new(PartyId::P0, self.cfg);
        let mut t1 = Tape::new(PartyId::P1, self.cfg);
        for r in requests {
            let (a, b) = self.deal_one(r)?;
            t0.records.push_back(a);
            t1.records.push_back(b);
        }
        Ok((t0, t1))
    }
}

/// Source of correlated randomness for one party's online computation.
pub trait Preprocessing {
    fn triple(&mut self, lhs: &[usize], rhs: &[usize], op: ProductOp) -> Result<BeaverTriple, DealerError>;
    fn square_pair(&mut self, shape: &[usize]) -> Result<SquarePair, DealerError>;
    fn and_triple(&mut self, shape: &[usize]) -> Result<AndTriple, DealerError>;
}

/// One party's pre-dealt records, consumed strictly in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tape {
    party: PartyId,
    cfg: FixedConfig,
    records: VecDeque<Record>,
}

impl Tape {
    pub fn new(party: PartyId, cfg: FixedConfig) -> Self {
        Tape {
            party,
            cfg,
            records: VecDeque::new(),
        }
    }

    pub fn party(&self) -> PartyId {
        self.party
    }

    pub fn config(&self) -> FixedConfig {
        self.cfg
    }

    pub fn remaining(&self) -> usize {
        self.records.len()
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.records.iter()
    }

    pub fn push(&mut self, record: Record) {
        self.records.push_back(record);
    }

    fn pop(&mut self, wanted: Request) -> Result<Record, DealerError> {
        let rec = self
            .records
            .pop_front()
            .ok_or_else(|| DealerError::TapeExhausted(wanted.to_string()))?;
        let found = rec.request();
        if found != wanted {
            return Err(DealerError::Mismatch {
                wanted: wanted.to_string(),
                found: found.to_string(),
            });
        }
        Ok(rec)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), DealerError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(TAPE_MAGIC);
        buf.extend_from_slice(&TAPE_VERSION.to_le_bytes());
        buf.push(self.cfg.total_bits() as u8);
        buf.push(self.cfg.frac_bits() as u8);
        buf.push(self.party.index() as u8);
        for rec in &self.records {
            let (tag, tensors): (u8, Vec<&RingTensor>) = match rec {
                Record::Triple(t) => (1, vec![&t.a, &t.b, &t.z]),
                Record::Square(p) => (2, vec![&p.a, &p.z]),
                Record::And(t) => (3, vec![&t.a, &t.b, &t.c]),
            };
            buf.push(tag);
            buf.extend_from_slice(&rec.serial().to_le_bytes());
            if let Record::Triple(t) = rec {
                let (code, stride, padding) = match t.op {
                    ProductOp::Elementwise => (0u8, 0, 0),
                    ProductOp::Matmul => (1, 0, 0),
                    ProductOp::Conv2d { stride, padding } => (2, stride as u32, padding as u32),
                };
                buf.push(code);
                buf.extend_from_slice(&stride.to_le_bytes());
                buf.extend_from_slice(&padding.to_le_bytes());
            }
            for t in tensors {
                t.write_wire(&mut buf);
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tape, DealerError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let bad = |m: &str| DealerError::Format(m.to_string());
        if bytes.len() < 9 || &bytes[..4] != TAPE_MAGIC {
            return Err(bad("missing ARPT header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != TAPE_VERSION {
            return Err(DealerError::Format(format!("unsupported tape version {version}")));
        }
        let cfg = FixedConfig::new(bytes[6] as u32, bytes[7] as u32).map_err(|e| DealerError::Format(e.to_string()))?;
        let party = PartyId::from_index(bytes[8] as usize).ok_or_else(|| bad("party byte"))?;
        let bits = cfg.total_bits();
        let mut tape = Tape::new(party, cfg);
        let mut pos = 9;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], DealerError> {
            let s = bytes.get(*pos..*pos + n).ok_or_else(|| bad("truncated record"))?;
            *pos += n;
            Ok(s)
        };
        let tensor = |pos: &mut usize| -> Result<RingTensor, DealerError> {
            let (t, used) = RingTensor::read_wire(&bytes[*pos..], bits).map_err(|e| DealerError::Format(e.to_string()))?;
            *pos += used;
            Ok(t)
        };
        while pos < bytes.len() {
            let tag = take(&mut pos, 1)?[0];
            let serial = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let rec = match tag {
                1 => {
                    let code = take(&mut pos, 1)?[0];
                    let stride = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
                    let padding = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
                    let op = match code {
                        0 => ProductOp::Elementwise,
                        1 => ProductOp::Matmul,
                        2 => ProductOp::Conv2d { stride, padding },
                        _ => return Err(bad("unknown product op")),
                    };
                    let (a, b, z) = (tensor(&mut pos)?, tensor(&mut pos)?, tensor(&mut pos)?);
                    let want = op.output_shape(a.shape(), b.shape()).map_err(|e| DealerError::Format(e.to_string()))?;
                    if want != z.shape() {
                        return Err(bad("triple output shape"));
                    }
                    Record::Triple(BeaverTriple { serial, op, a, b, z })
                }
                2 => {
                    let (a, z) = (tensor(&mut pos)?, tensor(&mut pos)?);
                    if a.shape() != z.shape() {
                        return Err(bad("square pair shapes differ"));
                    }
                    Record::Square(SquarePair { serial, a, z })
                }
                3 => {
                    let (a, b, c) = (tensor(&mut pos)?, tensor(&mut pos)?, tensor(&mut pos)?);
                    if a.shape() != b.shape() || a.shape() != c.shape() {
                        return Err(bad("AND triple shapes differ"));
                    }
                    Record::And(AndTriple { serial, a, b, c })
                }
                t => return Err(DealerError::Format(format!("unknown record tag {t}"))),
            };
            tape.records.push_back(rec);
        }
        Ok(tape)
    }

    pub fn save(&self, path: &Path) -> Result<(), DealerError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tape, DealerError> {
        Tape::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

impl Preprocessing for Tape {
    fn triple(&mut self, lhs: &[usize], rhs: &[usize], op: ProductOp) -> Result<BeaverTriple, DealerError> {
        match self.pop(Request::Triple {
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
            op,
        })? {
            Record::Triple(t) => Ok(t),
            _ => unreachable!("request kind checked by pop"),
        }
    }

    fn square_pair(&mut self, shape: &[usize]) -> Result<SquarePair, DealerError> {
        match self.pop(Request::Square { shape: shape.to_vec() })? {
            Record::Square(p) => Ok(p),
            _ => unreachable!("request kind checked by pop"),
        }
    }

    fn and_triple(&mut self, shape: &[usize]) -> Result<AndTriple, DealerError> {
        match self.pop(Request::And { shape: shape.to_vec() })? {
            Record::And(t) => Ok(t),
            _ => unreachable!("request kind checked by pop"),
        }
    }
}

/// Records requests and hands out all-zero material with fresh serials.
#[derive(Debug, Clone)]
pub struct Planner {
    bits: u32,
    requests: Vec<Request>,
}

impl Planner {
    pub fn new(bits: u32) -> Self {
        Planner {
            bits,
            requests: Vec::new(),
        }
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn into_requests(self) -> Vec<Request> {
        self.requests
    }

    fn zeros(&self, shape: &[usize]) -> RingTensor {
        RingTensor::zeros(shape, self.bits)
    }
}

impl Preprocessing for Planner {
    fn triple(&mut self, lhs: &[usize], rhs: &[usize], op: ProductOp) -> Result<BeaverTriple, DealerError> {
        let out = op.output_shape(lhs, rhs).map_err(|e| DealerError::Shape(e.to_string()))?;
        self.requests.push(Request::Triple {
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
            op,
        });
        Ok(BeaverTriple {
            serial: self.requests.len() as u64,
            op,
            a: self.zeros(lhs),
            b: self.zeros(rhs),
            z: self.zeros(&out),
        })
    }

    fn square_pair(&mut self, shape: &[usize]) -> Result<SquarePair, DealerError> {
        self.requests.push(Request::Square { shape: shape.to_vec() });
        Ok(SquarePair {
            serial: self.requests.len() as u64,
            a: self.zeros(shape),
            z: self.zeros(shape),
        })
    }

    fn and_triple(&mut self, shape: &[usize]) -> Result<AndTriple, DealerError> {
        self.requests.push(Request::And { shape: shape.to_vec() });
        Ok(AndTriple {
            serial: self.requests.len() as u64,
            a: self.zeros(shape),
            b: self.zeros(shape),
            c: self.zeros(shape),
        })
    }
}
