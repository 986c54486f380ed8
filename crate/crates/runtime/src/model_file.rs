//! `ARPM` model files: fixed-point config, architecture, plaintext weights,
//! replacement masks, polynomial coefficients and provenance.
//!
//! Layout (little-endian): magic, version u16, L u8, f u8, input rank u32 and
//! dims, layer count u32, tagged layers, provenance seed u64 and 32-byte
//! config hash. Reals are stored as f64 bit patterns.

use std::path::Path;

use arp_core::autorep::{AutoRepActivation, IndicatorState};
use arp_core::dapa::{ChannelPolys, ChannelStats, PolyCoeffs};
use arp_core::nn::{BatchNorm, Conv2d, Dense, Layer, Model, Parameter};
use arp_core::{FixedConfig, Tensor};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MODEL_MAGIC: &[u8; 4] = b"ARPM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("unsupported model file: {0}")]
    Version(String),
    #[error("truncated model file")]
    Truncated,
    #[error("inconsistent model file: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: [u8; 32],
}

impl Provenance {
    /// Hashes a textual description of the producing configuration.
    pub fn new(seed: u64, config: &str) -> Self {
        Provenance {
            seed,
            config_hash: Sha256::digest(config.as_bytes()).into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub cfg: FixedConfig,
    pub model: Model<f64>,
    pub provenance: Provenance,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn reals(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn shape(&mut self, s: &[usize]) {
        self.u32(s.len());
        s.iter().for_each(|&d| self.u32(d));
    }
    fn tensor(&mut self, t: &Tensor<f64>) {
        self.shape(t.shape());
        self.reals(t.data());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or(ModelFileError::Truncated)?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ModelFileError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64, ModelFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ModelFileError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn reals(&mut self, n: usize) -> Result<Vec<f64>, ModelFileError> {
        if n > self.bytes.len() {
            return Err(ModelFileError::Truncated);
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn shape(&mut self) -> Result<Vec<usize>, ModelFileError> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(ModelFileError::Inconsistent(format!("rank {rank}")));
        }
        (0..rank).map(|_| self.u32()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor<f64>, ModelFileError> {
        let shape = self.shape()?;
        let data = self.reals(shape.iter().product())?;
        Ok(Tensor::from_vec(&shape, data))
    }
}

fn inconsistent(m: impl Into<String>) -> ModelFileError {
    ModelFileError::Inconsistent(m.into())
}

impl ModelFile {
    pub fn new(cfg: FixedConfig, model: Model<f64>, provenance: Provenance) -> Self {
        ModelFile {
            cfg,
            model,
            provenance,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MODEL_MAGIC);
        w.0.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        w.u8(self.cfg.total_bits() as u8);
        w.u8(self.cfg.frac_bits() as u8);
        w.shape(self.model.input_shape());
        w.u32(self.model.layers.len());
        for layer in &self.model.layers {
            match layer {
                Layer::Dense(d) => {
                    w.u8(1);
                    w.tensor(&d.weight.value);
                    w.tensor(&d.bias.value);
                }
                Layer::Conv2d(c) => {
                    w.u8(2);
                    w.u32(c.stride);
                    w.u32(c.padding);
                    w.tensor(&c.weight.value);
                    w.tensor(&c.bias.value);
                }
                Layer::BatchNorm(b) => {
                    w.u8(3);
                    w.tensor(&b.gamma.value);
                    w.tensor(&b.beta.value);
                    w.reals(&b.running_mean);
                    w.reals(&b.running_var);
                    w.f64(b.momentum);
                    w.f64(b.eps);
                }
                Layer::AvgPool { size } => {
                    w.u8(4);
                    w.u32(*size);
                }
                Layer::Flatten => w.u8(5),
                Layer::Activation(a) => {
                    w.u8(6);
                    w.shape(a.shape());
                    w.0.extend_from_slice(a.indicator.mask().data());
                    w.reals(a.indicator.aux().data());
                    w.f64(a.indicator.threshold());
                    w.u32(a.polys.channels());
                    for p in a.polys.rows() {
                        w.u32(p.coeffs().len());
                        w.reals(p.coeffs());
                    }
                    w.u32(a.stats.channels());
                    w.f64(a.stats.momentum());
                    w.u64(a.stats.batches() as u64);
                    w.reals(a.stats.mean());
                    w.reals(a.stats.var());
                }
            }
        }
        w.u64(self.provenance.seed);
        w.0.extend_from_slice(&self.provenance.config_hash);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelFileError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| ModelFileError::Version("missing ARPM magic".into()))? != MODEL_MAGIC {
            return Err(ModelFileError::Version("missing ARPM magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(ModelFileError::Version(format!("version {version}")));
        }
        let (l, f) = (r.u8()? as u32, r.u8()? as u32);
        let cfg = FixedConfig::new(l, f).map_err(|e| inconsistent(e.to_string()))?;
        let input_shape = r.shape()?;
        let count = r.u32()?;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            layers.push(match r.u8()? {
                1 => {
                    let weight = r.tensor()?;
                    let bias = r.tensor()?;
                    if weight.shape().len() != 2 || bias.shape() != [weight.shape()[1]] {
                        return Err(inconsistent("dense parameter shapes"));
                    }
                    Layer::Dense(Dense {
                        weight: Parameter::new(weight),
                        bias: Parameter::new(bias),
                    })
                }
                2 => {
                    let (stride, padding) = (r.u32()?, r.u32()?);
                    let weight = r.tensor()?;
                    let bias = r.tensor()?;
                    if weight.shape().len() != 4 || bias.shape() != [weight.shape()[0]] || stride == 0 {
                        return Err(inconsistent("conv parameter shapes"));
                    }
                    Layer::Conv2d(Conv2d {
                        weight: Parameter::new(weight),
                        bias: Parameter::new(bias),
                        stride,
                        padding,
                    })
                }
                3 => {
                    let gamma = r.tensor()?;
                    let beta = r.tensor()?;
                    let c = gamma.len();
                    if beta.len() != c {
                        return Err(inconsistent("batch norm parameter shapes"));
                    }
                    Layer::BatchNorm(BatchNorm {
                        gamma: Parameter::new(gamma),
                        beta: Parameter::new(beta),
                        running_mean: r.reals(c)?,
                        running_var: r.reals(c)?,
                        momentum: r.f64()?,
                        eps: r.f64()?,
                    })
                }
                4 => Layer::AvgPool { size: r.u32()? },
                5 => Layer::Flatten,
                6 => {
                    let shape = r.shape()?;
                    let n: usize = shape.iter().product();
                    let mask = Tensor::from_vec(&shape, r.take(n)?.to_vec());
                    let aux = Tensor::from_vec(&shape, r.reals(n)?);
                    let threshold = r.f64()?;
                    let indicator = IndicatorState::from_parts(mask, aux, threshold).map_err(|e| inconsistent(e.to_string()))?;
                    let channels = r.u32()?;
                    if shape.first() != Some(&channels) {
                        return Err(inconsistent(format!("{channels} coefficient rows for activation {shape:?}")));
                    }
                    let mut rows = Vec::with_capacity(channels);
                    for _ in 0..channels {
                        let k = r.u32()?;
                        rows.push(PolyCoeffs::new(r.reals(k)?).map_err(|e| inconsistent(e.to_string()))?);
                    }
                    let stat_channels = r.u32()?;
                    if stat_channels != channels {
                        return Err(inconsistent("statistics channels"));
                    }
                    let momentum = r.f64()?;
                    let batches = r.u64()? as usize;
                    let mean = r.reals(channels)?;
                    let var = r.reals(channels)?;
                    Layer::Activation(AutoRepActivation {
                        indicator,
                        polys: ChannelPolys::new(rows),
                        stats: ChannelStats::from_parts(mean, var, momentum, batches),
                        aux_grad: Tensor::zeros(&shape),
                    })
                }
                t => return Err(inconsistent(format!("unknown layer tag {t}"))),
            });
        }
        let seed = r.u64()?;
        let config_hash = r.take(32)?.try_into().unwrap();
        if r.pos != bytes.len() {
            return Err(inconsistent("trailing bytes"));
        }
        let model = Model::from_layers(&input_shape, layers).map_err(|e| inconsistent(e.to_string()))?;
        Ok(ModelFile {
            cfg,
            model,
            provenance: Provenance { seed, config_hash },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelFileError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelFileError> {
        ModelFile::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized file.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelFile {
        let mut m = Model::small_cnn(8, 10, 3).unwrap();
        for a in m.activations_mut() {
            a.indicator.set(0, false);
            a.stats.observe(&vec![0.5; a.stats.channels()], &vec![2.0; a.stats.channels()]);
            arp_core::autorep::refresh_coeffs(a);
        }
        ModelFile::new(FixedConfig::default(), m, Provenance::new(3, "small_cnn"))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let f = sample();
        let bytes = f.to_bytes();
        let g = ModelFile::from_bytes(&bytes).unwrap();
        assert_eq!(g, f);
        assert_eq!(g.to_bytes(), bytes);
        let x = Tensor::from_vec(&[2, 1, 8, 8], (0..128).map(|i| (i as f64 * 0.37).sin()).collect());
        assert_eq!(f.model.predict(&x).unwrap(), g.model.predict(&x).unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(ModelFile::from_bytes(&bytes[..bytes.len() - 3]), Err(ModelFileError::Truncated)));
        bytes[0] = b'X';
        assert!(matches!(ModelFile::from_bytes(&bytes), Err(ModelFileError::Version(_))));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(ModelFile::from_bytes(&bytes), Err(ModelFileError::Version(_))));
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(matches!(ModelFile::from_bytes(&bytes), Err(ModelFileError::Inconsistent(_))));
    }

    #[test]
    fn seeded_file_digest_is_stable() {
        let f = ModelFile::new(
            FixedConfig::default(),
            Model::mlp(&[2, 4, 2], 11),
            Provenance::new(11, "mlp"),
        );
        assert_eq!(f.digest(), ModelFile::from_bytes(&f.to_bytes()).unwrap().digest());
        assert_eq!(f.digest(), GOLDEN_MLP_DIGEST);
    }

    const GOLDEN_MLP_DIGEST: &str = "69b407d86521fe0ce9801c86795f709f031290f7ed96bc5b9613a8a9bcfb92f2";
}
