//! Secure evaluation of an exported model: weights and the replacement plan
//! are public, activations stay secret shared end to end.

use arp_core::dapa::ChannelPolys;
use arp_core::fixnum::encode;
use arp_core::nn::{Layer, Model};
use arp_core::{FixedConfig, FixedError, ProductOp, RingTensor, Tensor};
use arp_mpc::dealer::Preprocessing;
use arp_mpc::{Phase, ProtocolError, Session, ShareTensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("layer {0} cannot be evaluated securely: {1}")]
    Unsupported(usize, String),
    #[error(transparent)]
    Fixed(#[from] FixedError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SecureLayer {
    Affine {
        weight: RingTensor,
        bias: RingTensor,
        op: ProductOp,
    },
    AvgPool(usize),
    Flatten,
    Activation {
        mask: Tensor<u8>,
        polys: ChannelPolys<f64>,
    },
}

/// Fixed-point image of a model with batch norm folded away.
#[derive(Debug, Clone, PartialEq)]
pub struct PublicModel {
    pub cfg: FixedConfig,
    pub input_shape: Vec<usize>,
    pub layers: Vec<SecureLayer>,
    /// Folded real-valued model the fixed-point layers were encoded from.
    pub reference: Model<f64>,
}

impl PublicModel {
    pub fn new(model: &Model<f64>, cfg: FixedConfig) -> Result<Self, ExportError> {
        let folded = model.fold_batchnorm();
        let mut layers = Vec::with_capacity(folded.layers.len());
        for (i, layer) in folded.layers.iter().enumerate() {
            layers.push(match layer {
                Layer::Dense(d) => SecureLayer::Affine {
                    weight: encode(&d.weight.value, &cfg)?,
                    bias: encode(&d.bias.value, &cfg)?,
                    op: ProductOp::Matmul,
                },
                Layer::Conv2d(c) => SecureLayer::Affine {
                    weight: encode(&c.weight.value, &cfg)?,
                    bias: encode(&c.bias.value, &cfg)?,
                    op: ProductOp::Conv2d {
                        stride: c.stride,
                        padding: c.padding,
                    },
                },
                Layer::BatchNorm(_) => {
                    return Err(ExportError::Unsupported(i, "batch norm without a preceding linear layer".into()))
                }
                Layer::AvgPool { size } => SecureLayer::AvgPool(*size),
                Layer::Flatten => SecureLayer::Flatten,
                Layer::Activation(a) => {
                    if a.polys.max_degree() > 2 {
                        return Err(ExportError::Unsupported(i, "polynomial degree above 2".into()));
                    }
                    SecureLayer::Activation {
                        mask: a.indicator.mask().clone(),
                        polys: a.polys.clone(),
                    }
                }
            });
        }
        Ok(PublicModel {
            cfg,
            input_shape: folded.input_shape().to_vec(),
            layers,
            reference: folded,
        })
    }

    /// Active ReLU elements per example.
    pub fn relu_count(&self) -> usize {
        self.reference.relu_count()
    }

    /// Worst-case absolute logit error of the fixed-point evaluation on `x`,
    /// propagated layer by layer from encoding, truncation and coefficient
    /// rounding. Ignores the truncation wrap event, whose probability is
    /// about `|x| / 2^L` per element.
    pub fn error_bound(&self, x: &Tensor<f64>) -> Result<f64, arp_core::nn::NnError> {
        let ulp = self.cfg.ulp();
        let half = ulp / 2.0;
        let mut err = half;
        let mut act = x.clone();
        for (layer, real) in self.layers.iter().zip(&self.reference.layers) {
            let amax = act.max_abs();
            match (layer, real) {
                (SecureLayer::Affine { .. }, Layer::Dense(d)) => {
                    let (n_in, n_out) = (d.weight.value.shape()[0], d.weight.value.shape()[1]);
                    let col = (0..n_out)
                        .map(|j| (0..n_in).map(|i| d.weight.value.data()[i * n_out + j].abs()).sum::<f64>())
                        .fold(0.0, f64::max);
                    err = col * err + half * n_in as f64 * (amax + err) + ulp + half;
                }
                (SecureLayer::Affine { .. }, Layer::Conv2d(c)) => {
                    let per: usize = c.weight.value.shape()[1..].iter().product();
                    let row = c
                        .weight
                        .value
                        .data()
                        .chunks(per)
                        .map(|r| r.iter().map(|w| w.abs()).sum::<f64>())
                        .fold(0.0, f64::max);
                    err = row * err + half * per as f64 * (amax + err) + ulp + half;
                }
                (SecureLayer::AvgPool(k), _) => {
                    err = err + half * (k * k) as f64 * (amax + err) + ulp;
                }
                (SecureLayer::Activation { mask, polys }, _) => {
                    let relu_err = if mask.data().contains(&1) { err } else { 0.0 };
                    let poly_err = polys
                        .rows()
                        .iter()
                        .map(|p| {
                            let c1 = p.coeffs().get(1).copied().unwrap_or(0.0).abs();
                            let c2 = p.coeffs().get(2).copied().unwrap_or(0.0).abs();
                            let z = amax + err;
                            err * (c1 + 2.0 * c2 * z) + c2 * err * err + (1.0 + c2) * ulp + half * (1.0 + z + z * z)
                        })
                        .fold(0.0, f64::max);
                    err = relu_err.max(if mask.data().contains(&0) { poly_err } else { 0.0 });
                }
                _ => {}
            }
            act = arp_core::nn::Model::from_layers(act.shape()[1..].as_ref(), vec![real.clone()])?.predict(&act)?;
        }
        Ok(err)
    }
}

/// Runs every layer on shares; traffic is attributed to the linear,
/// comparison or polynomial phase by the protocol.
pub fn secure_forward<P: Preprocessing>(
    s: &mut Session<P>,
    model: &PublicModel,
    x: ShareTensor,
) -> Result<ShareTensor, ProtocolError> {
    let mut h = x;
    for layer in &model.layers {
        h = match layer {
            SecureLayer::Affine { weight, bias, op } => s.in_phase(Phase::Linear, |s| {
                let y = s.mul_public(&h, weight, model.cfg.frac_bits(), *op)?;
                s.add_channel_bias(&y, bias)
            })?,
            SecureLayer::AvgPool(k) => s.in_phase(Phase::Linear, |s| s.avg_pool(&h, *k))?,
            SecureLayer::Flatten => {
                let b = h.shape()[0];
                let rest = h.len() / b.max(1);
                h.reshape(&[b, rest])?
            }
            SecureLayer::Activation { mask, polys } => s.hybrid_activation(&h, mask, polys)?,
        };
    }
    Ok(h)
}
