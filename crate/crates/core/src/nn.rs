//! Small differentiable networks with hand-written backward passes.
//!
//! Tensors are batch-first. Dense layers take `[B, in]`; convolution, batch
//! norm and pooling take `[B, C, H, W]`. The channel axis is always axis 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autorep::{self, AutoRepActivation};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forward trace is stale (model changed since the forward pass)")]
    StaleCache,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { value, grad }
    }
}

/// Architecture descriptor for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm { channels: usize },
    AvgPool { size: usize },
    Flatten,
    /// Hybrid ReLU/polynomial activation over a per-example shape.
    Activation { shape: Vec<usize> },
}

impl LayerSpec {
    /// Per-example output shape, or an error if `input` is incompatible.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let bad = || NnError::Shape(format!("{self:?} cannot take input {input:?}"));
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [*inputs] {
                    return Err(bad());
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels || *stride == 0 {
                    return Err(bad());
                }
                if input[1] + 2 * padding < *kernel || input[2] + 2 * padding < *kernel {
                    return Err(bad());
                }
                Ok(vec![
                    *out_channels,
                    (input[1] + 2 * padding - kernel) / stride + 1,
                    (input[2] + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.is_empty() || input[0] != *channels {
                    return Err(bad());
                }
                Ok(input.to_vec())
            }
            LayerSpec::AvgPool { size } => {
                if input.len() != 3 || *size == 0 || input[1] % size != 0 || input[2] % size != 0 {
                    return Err(bad());
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            LayerSpec::Flatten => Ok(vec![numel(input)]),
            LayerSpec::Activation { shape } => {
                if input != shape.as_slice() {
                    return Err(bad());
                }
                Ok(input.to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `[inputs, outputs]`
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `[out, in, k, k]`
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Dense(Dense<T>),
    Conv2d(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    AvgPool { size: usize },
    Flatten,
    Activation(AutoRepActivation<T>),
}

impl<T: Real> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => LayerSpec::Dense {
                inputs: d.weight.value.shape()[0],
                outputs: d.weight.value.shape()[1],
            },
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                in_channels: c.weight.value.shape()[1],
                out_channels: c.weight.value.shape()[0],
                kernel: c.weight.value.shape()[2],
                stride: c.stride,
                padding: c.padding,
            },
            Layer::BatchNorm(b) => LayerSpec::BatchNorm {
                channels: b.running_mean.len(),
            },
            Layer::AvgPool { size } => LayerSpec::AvgPool { size: *size },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Activation(a) => LayerSpec::Activation {
                shape: a.indicator.shape().to_vec(),
            },
        }
    }

    fn init(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..numel(shape))
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect();
            Tensor::from_vec(shape, data)
        };
        match spec {
            LayerSpec::Dense { inputs, outputs } => Layer::Dense(Dense {
                weight: Parameter::new(uniform(&[*inputs, *outputs], *inputs)),
                bias: Parameter::new(Tensor::zeros(&[*outputs])),
            }),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv2d(Conv2d {
                weight: Parameter::new(uniform(
                    &[*out_channels, *in_channels, *kernel, *kernel],
                    in_channels * kernel * kernel,
                )),
                bias: Parameter::new(Tensor::zeros(&[*out_channels])),
                stride: *stride,
                padding: *padding,
            }),
            LayerSpec::BatchNorm { channels } => Layer::BatchNorm(BatchNorm {
                gamma: Parameter::new(Tensor::full(&[*channels], T::one())),
                beta: Parameter::new(Tensor::zeros(&[*channels])),
                running_mean: vec![T::zero(); *channels],
                running_var: vec![T::one(); *channels],
                momentum: T::of(0.1),
                eps: T::of(1e-5),
            }),
            LayerSpec::AvgPool { size } => Layer::AvgPool { size: *size },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Activation { shape } => Layer::Activation(AutoRepActivation::new(shape)),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            _ => Vec::new(),
        }
    }
}

/// Per-layer values saved by the forward pass for backprop.
#[derive(Debug, Clone)]
enum Cache<T> {
    Input(Tensor<T>),
    Norm {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: Option<(Vec<T>, Vec<T>)>,
    },
    Shape(Vec<usize>),
    PreActivation(Tensor<T>),
}

/// Caches from one forward pass, tied to the model version that produced them.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    version: u64,
    caches: Vec<Cache<T>>,
}

impl<T: Real> Trace<T> {
    /// Pre-activations seen by each activation layer, in layer order.
    pub fn pre_activations(&self) -> Vec<&Tensor<T>> {
        self.caches
            .iter()
            .filter_map(|c| match c {
                Cache::PreActivation(z) => Some(z),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    input_shape: Vec<usize>,
    pub layers: Vec<Layer<T>>,
    version: u64,
}

impl<T: Real> Model<T> {
    /// Builds a model with seeded uniform (He-style) initialization.
    pub fn from_specs(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self, NnError> {
        let mut shape = input_shape.to_vec();
        for spec in specs {
            shape = spec.output_shape(&shape)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs.iter().map(|s| Layer::init(s, &mut rng)).collect();
        Ok(Model {
            input_shape: input_shape.to_vec(),
            layers,
            version: 0,
        })
    }

    /// Assembles a model from existing layers, validating shape compatibility.
    pub fn from_layers(input_shape: &[usize], layers: Vec<Layer<T>>) -> Result<Self, NnError> {
        let mut shape = input_shape.to_vec();
        for layer in &layers {
            shape = layer.spec().output_shape(&shape)?;
        }
        Ok(Model {
            input_shape: input_shape.to_vec(),
            layers,
            version: 0,
        })
    }

    /// Dense stack with a hybrid activation after every hidden layer.
    pub fn mlp(widths: &[usize], seed: u64) -> Self {
        let mut specs = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            specs.push(LayerSpec::Dense {
                inputs: pair[0],
                outputs: pair[1],
            });
            if i + 2 < widths.len() {
                specs.push(LayerSpec::Activation {
                    shape: vec![pair[1]],
                });
            }
        }
        Self::from_specs(&[widths[0]], &specs, seed).expect("mlp widths are consistent")
    }

    /// conv(1->8)-BN-act-pool-conv(8->16)-BN-act-pool-dense for square grayscale images.
    pub fn small_cnn(side: usize, classes: usize, seed: u64) -> Result<Self, NnError> {
        if side % 4 != 0 || side == 0 {
            return Err(NnError::Shape(format!("image side {side} must be a multiple of 4")));
        }
        let conv = |i, o| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let specs = vec![
            conv(1, 8),
            LayerSpec::BatchNorm { channels: 8 },
            LayerSpec::Activation {
                shape: vec![8, side, side],
            },
            LayerSpec::AvgPool { size: 2 },
            conv(8, 16),
            LayerSpec::BatchNorm { channels: 16 },
            LayerSpec::Activation {
                shape: vec![16, side / 2, side / 2],
            },
            LayerSpec::AvgPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 16 * (side / 4) * (side / 4),
                outputs: classes,
            },
        ];
        Self::from_specs(&[1, side, side], &specs, seed)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Marks parameters as changed, invalidating outstanding traces.
    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn activations(&self) -> impl Iterator<Item = &AutoRepActivation<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Activation(a) => Some(a),
            _ => None,
        })
    }

    pub fn activations_mut(&mut self) -> impl Iterator<Item = &mut AutoRepActivation<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Activation(a) => Some(a),
            _ => None,
        })
    }

    /// Total number of activation elements per example.
    pub fn activation_elements(&self) -> usize {
        self.activations().map(|a| a.indicator.len()).sum()
    }

    pub fn relu_count(&self) -> usize {
        self.activations().map(|a| autorep::count_relu(&a.indicator)).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), NnError> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(NnError::Shape(format!(
                "batch {:?} does not match input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Forward pass caching everything backward needs. In training mode,
    /// batch-norm running statistics and activation channel statistics are updated.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Trace<T>), NnError> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (out, cache) = layer_forward(layer, &h, mode)?;
            if mode == Mode::Train {
                match (&mut *layer, &cache) {
                    (Layer::BatchNorm(bn), Cache::Norm { batch_stats: Some((m, v)), .. }) => {
                        for c in 0..m.len() {
                            bn.running_mean[c] =
                                (T::one() - bn.momentum) * bn.running_mean[c] + bn.momentum * m[c];
                            bn.running_var[c] =
                                (T::one() - bn.momentum) * bn.running_var[c] + bn.momentum * v[c];
                        }
                    }
                    (Layer::Activation(a), Cache::PreActivation(z)) => a.stats.observe_tensor(z),
                    _ => {}
                }
            }
            caches.push(cache);
            h = out;
        }
        Ok((
            h,
            Trace {
                version: self.version,
                caches,
            },
        ))
    }

    /// Inference-mode forward pass without caches or side effects.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer_forward(layer, &h, Mode::Eval)?.0;
        }
        Ok(h)
    }

    /// Backward pass: overwrites every parameter gradient and every
    /// activation's accuracy gradient on its auxiliary parameters.
    pub fn backward(&mut self, trace: &Trace<T>, dlogits: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        if trace.version != self.version || trace.caches.len() != self.layers.len() {
            return Err(NnError::StaleCache);
        }
        let mut grad = dlogits.clone();
        for (layer, cache) in self.layers.iter_mut().zip(trace.caches.iter()).rev() {
            grad = layer_backward(layer, cache, &grad)?;
        }
        Ok(grad)
    }

    /// Folds each inference-mode batch norm into the preceding dense or conv layer.
    pub fn fold_batchnorm(&self) -> Model<T> {
        let mut layers: Vec<Layer<T>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if let Layer::BatchNorm(bn) = layer {
                let scale: Vec<T> = (0..bn.running_var.len())
                    .map(|c| bn.gamma.value.data()[c] / (bn.running_var[c] + bn.eps).sqrt())
                    .collect();
                let shift: Vec<T> = (0..scale.len())
                    .map(|c| bn.beta.value.data()[c] - bn.running_mean[c] * scale[c])
                    .collect();
                match layers.last_mut() {
                    Some(Layer::Conv2d(conv)) => {
                        let per_out: usize = conv.weight.value.shape()[1..].iter().product();
                        for (i, w) in conv.weight.value.data_mut().iter_mut().enumerate() {
                            *w *= scale[i / per_out];
                        }
                        for (c, b) in conv.bias.value.data_mut().iter_mut().enumerate() {
                            *b = *b * scale[c] + shift[c];
                        }
                        continue;
                    }
                    Some(Layer::Dense(dense)) => {
                        let outs = dense.weight.value.shape()[1];
                        for (i, w) in dense.weight.value.data_mut().iter_mut().enumerate() {
                            *w *= scale[i % outs];
                        }
                        for (c, b) in dense.bias.value.data_mut().iter_mut().enumerate() {
                            *b = *b * scale[c] + shift[c];
                        }
                        continue;
                    }
                    _ => {}
                }
            }
            layers.push(layer.clone());
        }
        Model {
            input_shape: self.input_shape.clone(),
            layers,
            version: 0,
        }
    }
}

fn shape_err(what: &str, got: &[usize]) -> NnError {
    NnError::Shape(format!("{what} got {got:?}"))
}

fn layer_forward<T: Real>(layer: &Layer<T>, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>), NnError> {
    match layer {
        Layer::Dense(d) => {
            let (b, n_in) = match x.shape() {
                [b, n] => (*b, *n),
                s => return Err(shape_err("dense", s)),
            };
            let n_out = d.weight.value.shape()[1];
            if n_in != d.weight.value.shape()[0] {
                return Err(shape_err("dense", x.shape()));
            }
            let w = d.weight.value.data();
            let mut out = Vec::with_capacity(b * n_out);
            for r in 0..b {
                let mut row = d.bias.value.data().to_vec();
                for (i, &xv) in x.data()[r * n_in..(r + 1) * n_in].iter().enumerate() {
                    for (o, acc) in row.iter_mut().enumerate() {
                        *acc += xv * w[i * n_out + o];
                    }
                }
                out.extend(row);
            }
            Ok((Tensor::from_vec(&[b, n_out], out), Cache::Input(x.clone())))
        }
        Layer::Conv2d(c) => {
            if x.shape().len() != 4 || x.shape()[1] != c.weight.value.shape()[1] {
                return Err(shape_err("conv2d", x.shape()));
            }
            Ok((conv_forward(c, x), Cache::Input(x.clone())))
        }
        Layer::BatchNorm(bn) => {
            let channels = bn.running_mean.len();
            if x.shape().len() < 2 || x.shape()[1] != channels {
                return Err(shape_err("batch norm", x.shape()));
            }
            let (mean, var, batch_stats) = match mode {
                Mode::Train => {
                    let (m, v) = crate::dapa::channel_moments(x);
                    (m.clone(), v.clone(), Some((m, v)))
                }
                Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone(), None),
            };
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + bn.eps).sqrt()).collect();
            let inner: usize = x.shape()[2..].iter().product();
            let mut xhat = x.clone();
            let mut out = x.clone();
            for (i, (h, o)) in xhat.data_mut().iter_mut().zip(out.data_mut()).enumerate() {
                let c = (i / inner) % channels;
                *h = (*h - mean[c]) * inv_std[c];
                *o = bn.gamma.value.data()[c] * *h + bn.beta.value.data()[c];
            }
            Ok((
                out,
                Cache::Norm {
                    xhat,
                    inv_std,
                    batch_stats,
                },
            ))
        }
        Layer::AvgPool { size } => {
            let k = *size;
            let s = x.shape();
            if s.len() != 4 || s[2] % k != 0 || s[3] % k != 0 {
                return Err(shape_err("avgpool", s));
            }
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = (h / k, w / k);
            let norm = T::one() / T::of((k * k) as f64);
            let mut out = vec![T::zero(); n * c * oh * ow];
            for p in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        out[p * oh * ow + (y / k) * ow + xx / k] += x.data()[p * h * w + y * w + xx] * norm;
                    }
                }
            }
            Ok((Tensor::from_vec(&[n, c, oh, ow], out), Cache::Shape(s.to_vec())))
        }
        Layer::Flatten => {
            let b = x.shape()[0];
            let rest = x.len() / b.max(1);
            Ok((x.clone().reshape(&[b, rest]), Cache::Shape(x.shape().to_vec())))
        }
        Layer::Activation(a) => {
            let out = autorep::hybrid_forward(x, a)?;
            Ok((out, Cache::PreActivation(x.clone())))
        }
    }
}

fn conv_forward<T: Real>(c: &Conv2d<T>, x: &Tensor<T>) -> Tensor<T> {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ws = c.weight.value.shape();
    let (co, k) = (ws[0], ws[2]);
    let (s, p) = (c.stride, c.padding);
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let wd = c.weight.value.data();
    let xd = x.data();
    let mut out = vec![T::zero(); n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            let bias = c.bias.value.data()[o];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for i in 0..ci {
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xd[((b * ci + i) * h + iy as usize) * w + ix as usize]
                                    * wd[((o * ci + i) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, oh, ow], out)
}

fn layer_backward<T: Real>(layer: &mut Layer<T>, cache: &Cache<T>, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    match (layer, cache) {
        (Layer::Dense(d), Cache::Input(x)) => {
            let (b, n_in) = (x.shape()[0], x.shape()[1]);
            let n_out = d.weight.value.shape()[1];
            if dy.shape() != [b, n_out] {
                return Err(shape_err("dense backward", dy.shape()));
            }
            let w = d.weight.value.data();
            let mut dw = vec![T::zero(); n_in * n_out];
            let mut db = vec![T::zero(); n_out];
            let mut dx = vec![T::zero(); b * n_in];
            for r in 0..b {
                let g = &dy.data()[r * n_out..(r + 1) * n_out];
                for (o, &gv) in g.iter().enumerate() {
                    db[o] += gv;
                }
                for i in 0..n_in {
                    let xv = x.data()[r * n_in + i];
                    let mut acc = T::zero();
                    for (o, &gv) in g.iter().enumerate() {
                        dw[i * n_out + o] += xv * gv;
                        acc += w[i * n_out + o] * gv;
                    }
                    dx[r * n_in + i] = acc;
                }
            }
            d.weight.grad = Tensor::from_vec(&[n_in, n_out], dw);
            d.bias.grad = Tensor::from_vec(&[n_out], db);
            Ok(Tensor::from_vec(&[b, n_in], dx))
        }
        (Layer::Conv2d(c), Cache::Input(x)) => {
            let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let ws = c.weight.value.shape().to_vec();
            let (co, k) = (ws[0], ws[2]);
            let (s, p) = (c.stride, c.padding);
            let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
            let wd = c.weight.value.data();
            let xd = x.data();
            let mut dw = vec![T::zero(); wd.len()];
            let mut db = vec![T::zero(); co];
            let mut dx = vec![T::zero(); xd.len()];
            for b in 0..n {
                for o in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dy.data()[((b * co + o) * oh + oy) * ow + ox];
                            db[o] += g;
                            for i in 0..ci {
                                for ky in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * s + kx) as isize - p as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = ((b * ci + i) * h + iy as usize) * w + ix as usize;
                                        let wi = ((o * ci + i) * k + ky) * k + kx;
                                        dw[wi] += g * xd[xi];
                                        dx[xi] += g * wd[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            c.weight.grad = Tensor::from_vec(&ws, dw);
            c.bias.grad = Tensor::from_vec(&[co], db);
            Ok(Tensor::from_vec(x.shape(), dx))
        }
        (
            Layer::BatchNorm(bn),
            Cache::Norm {
                xhat,
                inv_std,
                batch_stats,
            },
        ) => {
            let channels = inv_std.len();
            let inner: usize = xhat.shape()[2..].iter().product();
            let count = T::of((xhat.shape()[0] * inner) as f64);
            let gamma = bn.gamma.value.data().to_vec();
            let mut dgamma = vec![T::zero(); channels];
            let mut dbeta = vec![T::zero(); channels];
            for (i, (&g, &xh)) in dy.data().iter().zip(xhat.data()).enumerate() {
                let c = (i / inner) % channels;
                dgamma[c] += g * xh;
                dbeta[c] += g;
            }
            let mut dx = dy.clone();
            for (i, v) in dx.data_mut().iter_mut().enumerate() {
                let c = (i / inner) % channels;
                let dxhat = *v * gamma[c];
                *v = if batch_stats.is_some() {
                    // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                    inv_std[c] / count
                        * (count * dxhat - gamma[c] * dbeta[c] - xhat.data()[i] * gamma[c] * dgamma[c])
                } else {
                    dxhat * inv_std[c]
                };
            }
            bn.gamma.grad = Tensor::from_vec(&[channels], dgamma);
            bn.beta.grad = Tensor::from_vec(&[channels], dbeta);
            Ok(dx)
        }
        (Layer::AvgPool { size }, Cache::Shape(s)) => {
            let k = *size;
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h / k, w / k);
            let norm = T::one() / T::of((k * k) as f64);
            let mut dx = vec![T::zero(); numel(s)];
            for (i, v) in dx.iter_mut().enumerate() {
                let p = i / (h * w);
                let y = (i / w) % h;
                let xx = i % w;
                *v = dy.data()[p * oh * ow + (y / k) * ow + xx / k] * norm;
            }
            Ok(Tensor::from_vec(s, dx))
        }
        (Layer::Flatten, Cache::Shape(s)) => Ok(dy.clone().reshape(s)),
        (Layer::Activation(a), Cache::PreActivation(z)) => {
            a.aux_grad = autorep::acc_grad_aux(dy, z, a)?;
            Ok(autorep::hybrid_backward(dy, z, a))
        }
        _ => Err(NnError::StaleCache),
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / batch`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>), NnError> {
    let (b, k) = match logits.shape() {
        [b, k] => (*b, *k),
        s => return Err(shape_err("cross entropy", s)),
    };
    if labels.len() != b {
        return Err(NnError::Shape(format!("{} labels for batch {b}", labels.len())));
    }
    let mut grad = vec![T::zero(); b * k];
    let mut loss = T::zero();
    let inv_b = T::one() / T::of(b as f64);
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(NnError::Label { label, classes: k });
        }
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
        let log_sum = sum.ln() + max;
        loss += log_sum - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_sum).exp();
            let target = if j == label { T::one() } else { T::zero() };
            grad[r * k + j] = (p - target) * inv_b;
        }
    }
    Ok((loss * inv_b, Tensor::from_vec(&[b, k], grad)))
}

pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> AdamSlot<T> {
    pub fn new(len: usize) -> Self {
        AdamSlot {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    /// One bias-corrected Adam descent step (beta1 0.9, beta2 0.999, eps 1e-8).
    pub fn step(&mut self, values: &mut [T], grads: &[T], lr: T) {
        let (b1, b2, eps) = (T::of(0.9), T::of(0.999), T::of(1e-8));
        self.t += 1;
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        for i in 0..values.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            values[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam,
}

/// Optimizer over a model's weight parameters.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    adam: Vec<AdamSlot<T>>,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            adam: Vec::new(),
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, lr: T) {
        let kind = self.kind;
        for (i, p) in model.params_mut().into_iter().enumerate() {
            let Parameter { value, grad } = p;
            match kind {
                OptimizerKind::Adam => {
                    if self.adam.len() <= i {
                        self.adam.push(AdamSlot::new(value.len()));
                    }
                    self.adam[i].step(value.data_mut(), grad.data(), lr);
                }
                OptimizerKind::Sgd { momentum } => {
                    if self.velocity.len() <= i {
                        self.velocity.push(vec![T::zero(); value.len()]);
                    }
                    let mom = T::of(momentum);
                    for ((v, w), &g) in self.velocity[i]
                        .iter_mut()
                        .zip(value.data_mut().iter_mut())
                        .zip(grad.data())
                    {
                        *v = mom * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
        }
        model.bump_version();
    }
}

/// Cosine annealing from `base` at step 0 to zero at `total`.
pub fn cosine_lr<T: Real>(base: T, step: usize, total: usize) -> T {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    base * T::of(0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
