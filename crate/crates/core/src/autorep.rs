//! Automatic ReLU replacement.
//!
//! Every activation element carries a binary indicator `m` (1 = ReLU,
//! 0 = polynomial) derived from a real auxiliary parameter `m_w`. Gradients
//! reach `m_w` through a softplus straight-through estimator; the indicator is
//! re-derived after each update with a two-threshold hysteresis rule, and a
//! ReLU-count penalty drives the number of surviving ReLUs toward a budget.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dapa::{self, ChannelPolys, ChannelStats, GaussianStats, PolyCoeffs};
use crate::data::Dataset;
use crate::nn::{self, AdamSlot, Mode, Model, NnError, Optimizer, OptimizerKind};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.003;
pub const DEFAULT_AUX_INIT: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutoRepError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid replacement config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Hysteresis: a ReLU is dropped only once `aux <= -t`, and a
/// polynomial is promoted only once `aux > t`.
pub fn next_indicator<T: Real>(previous: bool, aux: T, threshold: T) -> bool {
    if previous {
        aux > -threshold
    } else {
        aux > threshold
    }
}

/// How the auxiliary parameters are moved by their gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum IndicatorOptimizer<T> {
    /// Plain descent: `aux -= lr * grad`.
    Sgd,
    Adam(AdamSlot<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorState<T> {
    mask: Tensor<u8>,
    aux: Tensor<T>,
    threshold: T,
}

impl<T: Real> IndicatorState<T> {
    /// Constant auxiliary initialization; the mask follows the sign rule `aux > 0`.
    pub fn new(shape: &[usize], aux_init: T, threshold: T) -> Self {
        let aux = Tensor::full(shape, aux_init);
        let mask = aux.map(|a| u8::from(a > T::zero()));
        IndicatorState {
            mask,
            aux,
            threshold,
        }
    }

    pub fn from_parts(mask: Tensor<u8>, aux: Tensor<T>, threshold: T) -> Result<Self, AutoRepError> {
        if mask.shape() != aux.shape() {
            return Err(AutoRepError::Config("indicator and auxiliary shapes differ".into()));
        }
        if mask.data().iter().any(|&m| m > 1) {
            return Err(AutoRepError::Config("indicator values must be 0 or 1".into()));
        }
        Ok(IndicatorState {
            mask,
            aux,
            threshold,
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.mask.shape()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn mask(&self) -> &Tensor<u8> {
        &self.mask
    }

    pub fn aux(&self) -> &Tensor<T> {
        &self.aux
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: T) {
        self.threshold = threshold;
    }

    pub fn set(&mut self, index: usize, relu: bool) {
        self.mask.data_mut()[index] = u8::from(relu);
    }

    pub fn set_mask(&mut self, mask: Tensor<u8>) {
        assert_eq!(mask.shape(), self.mask.shape());
        self.mask = mask;
    }

    /// Moves `aux` along the descent direction of `grad`, then re-derives the
    /// mask with the hysteresis rule. Returns the number of flipped indicators.
    pub fn hysteresis_step(
        &mut self,
        grad: &Tensor<T>,
        optimizer: &mut IndicatorOptimizer<T>,
        lr: T,
    ) -> Result<usize, AutoRepError> {
        if grad.shape() != self.aux.shape() {
            return Err(AutoRepError::Nn(NnError::Shape(format!(
                "indicator gradient {:?} for state {:?}",
                grad.shape(),
                self.aux.shape()
            ))));
        }
        match optimizer {
            IndicatorOptimizer::Sgd => {
                for (a, &g) in self.aux.data_mut().iter_mut().zip(grad.data()) {
                    *a -= lr * g;
                }
            }
            IndicatorOptimizer::Adam(slot) => slot.step(self.aux.data_mut(), grad.data(), lr),
        }
        Ok(self.rebinarize())
    }

    /// Applies the hysteresis rule to the current `aux`; returns the flip count.
    pub fn rebinarize(&mut self) -> usize {
        let th = self.threshold;
        let mut flips = 0;
        for (m, &a) in self.mask.data_mut().iter_mut().zip(self.aux.data()) {
            let next = u8::from(next_indicator(*m == 1, a, th));
            flips += usize::from(next != *m);
            *m = next;
        }
        flips
    }
}

pub fn count_relu<T: Real>(state: &IndicatorState<T>) -> usize {
    state.mask.data().iter().filter(|&&m| m == 1).count()
}

/// Hybrid ReLU/polynomial activation layer with its replacement state.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoRepActivation<T> {
    pub indicator: IndicatorState<T>,
    pub polys: ChannelPolys<T>,
    pub stats: ChannelStats<T>,
    /// Accuracy gradient on `aux` from the latest backward pass.
    pub aux_grad: Tensor<T>,
}

impl<T: Real> AutoRepActivation<T> {
    /// All-ReLU start; coefficients fit to N(0, 1) until statistics arrive.
    pub fn new(shape: &[usize]) -> Self {
        let channels = shape.first().copied().unwrap_or(1);
        let unit = dapa::fit_closed_form(&GaussianStats::new(T::zero(), T::one()).expect("unit variance"));
        AutoRepActivation {
            indicator: IndicatorState::new(shape, T::of(DEFAULT_AUX_INIT), T::of(DEFAULT_THRESHOLD)),
            polys: ChannelPolys::uniform(channels, unit),
            stats: ChannelStats::new(channels, T::of(dapa::DEFAULT_MOMENTUM)),
            aux_grad: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.indicator.shape()
    }

    /// Elements per channel within one example.
    fn inner(&self) -> usize {
        self.shape()[1..].iter().product()
    }

    pub fn channel_of(&self, element: usize) -> usize {
        element / self.inner()
    }

    pub fn poly_for(&self, element: usize) -> &PolyCoeffs<T> {
        self.polys.channel(self.channel_of(element))
    }

    fn check(&self, z: &Tensor<T>) -> Result<usize, NnError> {
        if z.shape().len() != self.shape().len() + 1 || z.shape()[1..] != *self.shape() {
            return Err(NnError::Shape(format!(
                "activation over {:?} got {:?}",
                self.shape(),
                z.shape()
            )));
        }
        Ok(self.indicator.len())
    }
}

fn relu<T: Real>(z: T) -> T {
    z.max(T::zero())
}

/// `X = m * relu(Z) + (1 - m) * g_p(Z)` with `Z` laid out `[B, shape...]`.
pub fn hybrid_forward<T: Real>(z: &Tensor<T>, act: &AutoRepActivation<T>) -> Result<Tensor<T>, NnError> {
    let per = act.check(z)?;
    let mask = act.indicator.mask().data();
    let mut out = z.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let e = i % per;
        *v = if mask[e] == 1 {
            relu(*v)
        } else {
            act.poly_for(e).eval(*v)
        };
    }
    Ok(out)
}

/// `dL/dZ` with the mask fixed and coefficients treated as constants.
pub fn hybrid_backward<T: Real>(dy: &Tensor<T>, z: &Tensor<T>, act: &AutoRepActivation<T>) -> Tensor<T> {
    let per = act.indicator.len();
    let mask = act.indicator.mask().data();
    let mut dz = dy.clone();
    for (i, g) in dz.data_mut().iter_mut().enumerate() {
        let e = i % per;
        let zi = z.data()[i];
        let slope = if mask[e] == 1 {
            if zi > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        } else {
            act.poly_for(e).derivative(zi)
        };
        *g *= slope;
    }
    dz
}

/// Derivative of softplus, i.e. the logistic sigmoid, used as `dm/dm_w`.
pub fn ste_softplus_grad<T: Real>(aux: &Tensor<T>) -> Tensor<T> {
    aux.map(|a| {
        if a >= T::zero() {
            T::one() / (T::one() + (-a).exp())
        } else {
            let e = a.exp();
            e / (T::one() + e)
        }
    })
}

/// Accuracy gradient on the auxiliary parameters, summed over the batch:
/// `dL/dX * (relu(Z) - g_p(Z)) * sigmoid(m_w)`.
pub fn acc_grad_aux<T: Real>(dl_dx: &Tensor<T>, z: &Tensor<T>, act: &AutoRepActivation<T>) -> Result<Tensor<T>, NnError> {
    let per = act.check(z)?;
    if dl_dx.shape() != z.shape() {
        return Err(NnError::Shape(format!(
            "upstream gradient {:?} vs pre-activation {:?}",
            dl_dx.shape(),
            z.shape()
        )));
    }
    let ste = ste_softplus_grad(act.indicator.aux());
    let mut grad = Tensor::zeros(act.shape());
    let g = grad.data_mut();
    for (i, (&d, &zi)) in dl_dx.data().iter().zip(z.data()).enumerate() {
        let e = i % per;
        g[e] += d * (relu(zi) - act.poly_for(e).eval(zi));
    }
    for (v, &s) in g.iter_mut().zip(ste.data()) {
        *v *= s;
    }
    Ok(grad)
}

/// ReLU-count penalty gradient: `mu * sigmoid(m_w)` while the global count
/// exceeds the budget, exactly zero otherwise.
pub fn penalty_grad_aux<T: Real>(state: &IndicatorState<T>, relu_count: usize, budget: usize, mu: T) -> Tensor<T> {
    if relu_count > budget {
        ste_softplus_grad(state.aux()).map(|s| mu * s)
    } else {
        Tensor::zeros(state.shape())
    }
}

/// Replaces the coefficients with the closed-form channel-wise fit of the
/// running statistics. No-op until at least one batch was observed.
pub fn refresh_coeffs<T: Real>(act: &mut AutoRepActivation<T>) {
    if act.stats.is_warm() {
        act.polys = dapa::channelwise_coeffs(&act.stats);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementConfig {
    /// Target number of surviving ReLU elements.
    pub budget: usize,
    /// Penalty strength normalized by the original ReLU count.
    pub mu: f64,
    pub lr_indicator: f64,
    pub lr_weights: f64,
    pub epochs: usize,
    pub threshold: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_optimizer: OptimizerKind,
    /// Record every per-element indicator transition for auditing.
    pub log_transitions: bool,
    /// After the joint phase, flip the fewest indicators (ranked by `m_w`)
    /// needed to hit the budget exactly.
    pub project_budget: bool,
    /// Weight-only epochs with the final mask frozen.
    pub finetune_epochs: usize,
}

impl Default for ReplacementConfig {
    fn default() -> Self {
        ReplacementConfig {
            budget: 0,
            mu: 1.0,
            lr_indicator: 1e-3,
            lr_weights: 1e-4,
            epochs: 150,
            threshold: DEFAULT_THRESHOLD,
            batch_size: 64,
            seed: 0,
            weight_optimizer: OptimizerKind::Adam,
            log_transitions: false,
            project_budget: true,
            finetune_epochs: 5,
        }
    }
}

impl ReplacementConfig {
    fn validate(&self, elements: usize) -> Result<(), AutoRepError> {
        let bad = |m: String| Err(AutoRepError::Config(m));
        if self.budget > elements {
            return bad(format!("budget {} exceeds {elements} activation elements", self.budget));
        }
        if !(self.lr_indicator > 0.0) || !(self.lr_weights > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.mu > 0.0) {
            return bad("penalty mu must be positive".into());
        }
        if !(self.threshold >= 0.0) {
            return bad("threshold must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        Ok(())
    }
}

/// One logged indicator update for a single element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub step: u32,
    pub layer: u16,
    pub index: u32,
    pub before: bool,
    pub aux: f64,
    pub after: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub relu_count: usize,
    pub flips: usize,
    /// False for the mask-frozen fine-tuning epochs.
    pub joint: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub transitions: Vec<Transition>,
    pub threshold: f64,
    /// ReLU count when the joint phase ended, before any projection.
    pub joint_count: usize,
    /// Indicators changed by the budget projection.
    pub projected: usize,
}

impl History {
    /// `epoch,accuracy,relu_count,flips`; accuracy is test accuracy when available.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,accuracy,relu_count,flips\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{},{}\n",
                r.epoch,
                r.test_accuracy.unwrap_or(r.train_accuracy),
                r.relu_count,
                r.flips
            ));
        }
        s
    }

    /// Indicator flips summed over the last quarter of the joint epochs.
    pub fn late_flips(&self) -> usize {
        let joint: Vec<_> = self.epochs.iter().filter(|r| r.joint).collect();
        let n = joint.len();
        joint[n - n / 4..].iter().map(|r| r.flips).sum()
    }

    /// Index of the first logged transition that violates the hysteresis rule.
    pub fn first_violation(&self) -> Option<usize> {
        self.transitions
            .iter()
            .position(|t| next_indicator(t.before, t.aux, self.threshold) != t.after)
    }
}

/// Converged replacement plan: one mask and one coefficient set per activation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementPlan<T> {
    pub masks: Vec<Tensor<u8>>,
    pub polys: Vec<ChannelPolys<T>>,
}

impl<T: Real> ReplacementPlan<T> {
    pub fn of(model: &Model<T>) -> Self {
        ReplacementPlan {
            masks: model.activations().map(|a| a.indicator.mask().clone()).collect(),
            polys: model.activations().map(|a| a.polys.clone()).collect(),
        }
    }

    pub fn relu_count(&self) -> usize {
        self.masks
            .iter()
            .map(|m| m.data().iter().filter(|&&v| v == 1).count())
            .sum()
    }
}

/// Classification accuracy in inference mode.
pub fn accuracy<T: Real>(model: &Model<T>, data: &Dataset<T>) -> Result<f64, NnError> {
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        let logits = model.predict(&data.features().slice_rows(start, end))?;
        correct += nn::argmax_rows(&logits)
            .iter()
            .zip(&data.labels()[start..end])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Settings for ordinary supervised training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 5e-3,
            batch_size: 64,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Trains weights with indicators frozen; returns the mean loss of each epoch.
pub fn train_supervised<T: Real>(model: &mut Model<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<Vec<f64>, AutoRepError> {
    if data.is_empty() {
        return Err(AutoRepError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let (logits, trace) = model.forward(&x, Mode::Train)?;
            let (loss, dlogits) = nn::cross_entropy(&logits, &y)?;
            model.backward(&trace, &dlogits)?;
            opt.step(model, T::of(nn::cosine_lr(cfg.lr, step, total)));
            epoch_loss += loss.as_f64() * chunk.len() as f64;
            step += 1;
        }
        losses.push(epoch_loss / data.len() as f64);
    }
    Ok(losses)
}

/// Jointly trains weights and replacement indicators under a ReLU budget.
///
/// Each step: one backward pass with the mask fixed, an Adam step on the
/// weights, then per activation layer an Adam step on `m_w` using the accuracy
/// gradient plus the count penalty, followed by hysteresis re-binarization.
/// Coefficients are refreshed from running statistics before training and
/// after every epoch. Both learning rates follow cosine annealing.
pub fn train_replace<T: Real>(
    model: &mut Model<T>,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    cfg: &ReplacementConfig,
) -> Result<(ReplacementPlan<T>, History), AutoRepError> {
    if train.is_empty() {
        return Err(AutoRepError::EmptyDataset);
    }
    let elements = model.activation_elements();
    cfg.validate(elements)?;
    let threshold = T::of(cfg.threshold);
    let mu_raw = T::of(cfg.mu / elements.max(1) as f64);
    for act in model.activations_mut() {
        act.indicator.set_threshold(threshold);
    }

    // Warm up channel statistics so the first coefficients match the data.
    for start in (0..train.len()).step_by(cfg.batch_size) {
        let end = (start + cfg.batch_size).min(train.len());
        model.forward(&train.features().slice_rows(start, end), Mode::Train)?;
    }
    model.activations_mut().for_each(refresh_coeffs);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weight_opt = Optimizer::new(cfg.weight_optimizer);
    let mut aux_opts: Vec<IndicatorOptimizer<T>> = model
        .activations()
        .map(|a| IndicatorOptimizer::Adam(AdamSlot::new(a.indicator.len())))
        .collect();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History {
        threshold: cfg.threshold,
        ..History::default()
    };
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut flips = 0;
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let (logits, trace) = model.forward(&x, Mode::Train)?;
            let (loss, dlogits) = nn::cross_entropy(&logits, &y)?;
            model.backward(&trace, &dlogits)?;
            epoch_loss += loss.as_f64() * chunk.len() as f64;

            let lr_w = T::of(nn::cosine_lr(cfg.lr_weights, step, total));
            let lr_m = T::of(nn::cosine_lr(cfg.lr_indicator, step, total));
            weight_opt.step(model, lr_w);

            let count = model.relu_count();
            for (layer, (act, opt)) in model.activations_mut().zip(aux_opts.iter_mut()).enumerate() {
                let mut grad = penalty_grad_aux(&act.indicator, count, cfg.budget, mu_raw);
                grad.add_assign(&act.aux_grad);
                let before = cfg.log_transitions.then(|| act.indicator.mask().clone());
                flips += act.indicator.hysteresis_step(&grad, opt, lr_m)?;
                if let Some(before) = before {
                    let after = act.indicator.mask().data();
                    let aux = act.indicator.aux().data();
                    history.transitions.extend(before.data().iter().enumerate().map(|(i, &b)| Transition {
                        step: step as u32,
                        layer: layer as u16,
                        index: i as u32,
                        before: b == 1,
                        aux: aux[i].as_f64(),
                        after: after[i] == 1,
                    }));
                }
            }
            step += 1;
        }
        model.activations_mut().for_each(refresh_coeffs);
        history.epochs.push(EpochRecord {
            epoch,
            loss: epoch_loss / train.len() as f64,
            train_accuracy: accuracy(model, train)?,
            test_accuracy: test.map(|t| accuracy(model, t)).transpose()?,
            relu_count: model.relu_count(),
            flips,
            joint: true,
        });
    }

    history.joint_count = model.relu_count();
    if cfg.project_budget {
        history.projected = project_to_budget(model, cfg.budget);
    }
    let tune_total = cfg.finetune_epochs * per_epoch;
    let mut tune_opt = Optimizer::new(cfg.weight_optimizer);
    for (k, epoch) in (cfg.epochs..cfg.epochs + cfg.finetune_epochs).enumerate() {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (j, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.batch(chunk);
            let (logits, trace) = model.forward(&x, Mode::Train)?;
            let (loss, dlogits) = nn::cross_entropy(&logits, &y)?;
            model.backward(&trace, &dlogits)?;
            epoch_loss += loss.as_f64() * chunk.len() as f64;
            let lr = nn::cosine_lr(cfg.lr_weights, k * per_epoch + j, tune_total);
            tune_opt.step(model, T::of(lr));
        }
        model.activations_mut().for_each(refresh_coeffs);
        history.epochs.push(EpochRecord {
            epoch,
            loss: epoch_loss / train.len() as f64,
            train_accuracy: accuracy(model, train)?,
            test_accuracy: test.map(|t| accuracy(model, t)).transpose()?,
            relu_count: model.relu_count(),
            flips: 0,
            joint: false,
        });
    }
    Ok((ReplacementPlan::of(model), history))
}

/// Flips the fewest indicators needed to make the global ReLU count equal
/// `budget`: surplus ReLUs with the lowest `m_w` are dropped, or missing ones
/// are restored from the polynomial elements with the highest `m_w`. Ties go
/// to the earlier element. Returns the number of changed indicators.
pub fn project_to_budget<T: Real>(model: &mut Model<T>, budget: usize) -> usize {
    let count = model.relu_count();
    let want = usize::from(count < budget) as u8;
    let mut candidates: Vec<(T, usize, usize)> = Vec::new();
    for (l, act) in model.activations().enumerate() {
        let aux = act.indicator.aux().data();
        for (i, &m) in act.indicator.mask().data().iter().enumerate() {
            if m != want {
                candidates.push((aux[i], l, i));
            }
        }
    }
    let key = |c: &(T, usize, usize)| if want == 1 { -c.0 } else { c.0 };
    candidates.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let changes = count.abs_diff(budget);
    let mut acts: Vec<_> = model.activations_mut().collect();
    for &(_, l, i) in candidates.iter().take(changes) {
        acts[l].indicator.set(i, want == 1);
    }
    changes
}
