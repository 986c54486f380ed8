//! Distribution-aware polynomial approximation of ReLU.
//!
//! For pre-activations `Z ~ N(mu, sigma^2)` the coefficients minimizing
//! `E[(relu(Z) - c0 - c1 Z - c2 Z^2)^2]` have a closed form; for other
//! distributions or degrees the same objective is solved by least squares over
//! samples.

use statrs::function::erf::erfc;
use thiserror::Error;

use crate::real::Real;
use crate::tensor::Tensor;

/// Channel variances below this are clamped before fitting.
pub const VAR_FLOOR: f64 = 1e-4;

/// Default EMA momentum for running channel statistics.
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DapaError {
    #[error("variance must be positive and finite, got {0}")]
    Domain(f64),
    #[error("need at least {needed} samples for degree {degree}, got {got}")]
    TooFewSamples {
        needed: usize,
        got: usize,
        degree: usize,
    },
    #[error("degenerate sample distribution: {0}")]
    Degenerate(&'static str),
    #[error("polynomial degree must be at least 1")]
    Degree,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianStats<T> {
    mean: T,
    var: T,
}

impl<T: Real> GaussianStats<T> {
    pub fn new(mean: T, var: T) -> Result<Self, DapaError> {
        if !(var > T::zero()) || !var.is_finite() || !mean.is_finite() {
            return Err(DapaError::Domain(var.as_f64()));
        }
        Ok(GaussianStats { mean, var })
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    pub fn var(&self) -> T {
        self.var
    }

    pub fn std(&self) -> T {
        self.var.sqrt()
    }
}

/// Polynomial `c0 + c1 z + ... + cs z^s`, lowest order first.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyCoeffs<T> {
    coeffs: Vec<T>,
}

impl<T: Real> PolyCoeffs<T> {
    pub fn new(coeffs: Vec<T>) -> Result<Self, DapaError> {
        if coeffs.len() < 2 {
            return Err(DapaError::Degree);
        }
        Ok(PolyCoeffs { coeffs })
    }

    pub fn quadratic(c0: T, c1: T, c2: T) -> Self {
        PolyCoeffs {
            coeffs: vec![c0, c1, c2],
        }
    }

    pub fn identity() -> Self {
        PolyCoeffs {
            coeffs: vec![T::zero(), T::one()],
        }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    /// Coefficient of `z^i`, zero past the degree.
    pub fn get(&self, i: usize) -> T {
        self.coeffs.get(i).copied().unwrap_or_else(T::zero)
    }

    pub fn eval(&self, z: T) -> T {
        self.coeffs
            .iter()
            .rev()
            .fold(T::zero(), |acc, &c| acc * z + c)
    }

    pub fn derivative(&self, z: T) -> T {
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(T::zero(), |acc, (i, &c)| acc * z + c * T::of(i as f64))
    }
}

/// One polynomial per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPolys<T> {
    rows: Vec<PolyCoeffs<T>>,
}

impl<T: Real> ChannelPolys<T> {
    pub fn new(rows: Vec<PolyCoeffs<T>>) -> Self {
        ChannelPolys { rows }
    }

    pub fn uniform(channels: usize, poly: PolyCoeffs<T>) -> Self {
        ChannelPolys {
            rows: vec![poly; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[PolyCoeffs<T>] {
        &self.rows
    }

    pub fn channel(&self, c: usize) -> &PolyCoeffs<T> {
        &self.rows[c]
    }

    pub fn max_degree(&self) -> usize {
        self.rows.iter().map(|p| p.degree()).max().unwrap_or(1)
    }
}

/// Running per-channel mean and variance, updated by exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats<T> {
    mean: Vec<T>,
    var: Vec<T>,
    momentum: T,
    batches: usize,
}

impl<T: Real> ChannelStats<T> {
    pub fn new(channels: usize, momentum: T) -> Self {
        ChannelStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum,
            batches: 0,
        }
    }

    pub fn from_parts(mean: Vec<T>, var: Vec<T>, momentum: T, batches: usize) -> Self {
        assert_eq!(mean.len(), var.len());
        ChannelStats {
            mean,
            var,
            momentum,
            batches,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn var(&self) -> &[T] {
        &self.var
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn is_warm(&self) -> bool {
        self.batches > 0
    }

    /// The first observed batch initializes the statistics outright.
    pub fn observe(&mut self, batch_mean: &[T], batch_var: &[T]) {
        assert_eq!(batch_mean.len(), self.mean.len(), "channel count mismatch");
        let m = if self.batches == 0 {
            T::one()
        } else {
            self.momentum
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (T::one() - m) * self.mean[c] + m * batch_mean[c];
            self.var[c] = (T::one() - m) * self.var[c] + m * batch_var[c];
        }
        self.batches += 1;
    }

    /// Observes a batch laid out `[B, C, ...]`.
    pub fn observe_tensor(&mut self, z: &Tensor<T>) {
        let (mean, var) = channel_moments(z);
        self.observe(&mean, &var);
    }
}

/// Per-channel mean and population variance of a `[B, C, ...]` tensor.
pub fn channel_moments<T: Real>(z: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let shape = z.shape();
    let (b, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let count = T::of((b * inner) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for (i, &v) in z.data().iter().enumerate() {
        mean[(i / inner) % c] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, &v) in z.data().iter().enumerate() {
        let d = v - mean[(i / inner) % c];
        var[(i / inner) % c] += d * d;
    }
    var.iter_mut().for_each(|s| *s /= count);
    (mean, var)
}

/// Closed-form second-order fit for a Gaussian input.
pub fn fit_closed_form<T: Real>(g: &GaussianStats<T>) -> PolyCoeffs<T> {
    let mu = g.mean.as_f64();
    let sigma = g.std().as_f64();
    let sqrt2 = std::f64::consts::SQRT_2;
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let gauss = (-mu * mu / (2.0 * sigma * sigma)).exp();
    let tail = erfc(sqrt2 * mu / (2.0 * sigma));

    let c2 = sqrt2 * gauss / (4.0 * sqrt_pi * sigma);
    let c1 = -sqrt2 * mu * gauss / (2.0 * sqrt_pi * sigma) - tail / 2.0 + 1.0;
    let c0 = sqrt2 * mu * mu * gauss / (4.0 * sqrt_pi * sigma) + sqrt2 * sigma * gauss / (4.0 * sqrt_pi);
    PolyCoeffs::quadratic(T::of(c0), T::of(c1), T::of(c2))
}

/// Which version of the closed-form minimum loss to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossForm {
    /// Last term uses `exp(-mu^2 / sigma^2)`; agrees with direct minimization.
    #[default]
    Corrected,
    /// Last term uses the published `exp(-sigma^2 / sigma^2)`, kept for comparison.
    AsPrinted,
}

/// Mean squared error of the optimal second-order fit.
pub fn min_approx_loss<T: Real>(g: &GaussianStats<T>) -> T {
    min_approx_loss_with(g, LossForm::Corrected)
}

pub fn min_approx_loss_with<T: Real>(g: &GaussianStats<T>, form: LossForm) -> T {
    let mu = g.mean.as_f64();
    let var = g.var.as_f64();
    let sigma = var.sqrt();
    let sqrt2 = std::f64::consts::SQRT_2;
    let pi = std::f64::consts::PI;
    let e = erfc(sqrt2 * mu / (2.0 * sigma));
    let gauss = (-mu * mu / (2.0 * var)).exp();
    let last = match form {
        LossForm::Corrected => (-mu * mu / var).exp(),
        LossForm::AsPrinted => (-var / var).exp(),
    };
    let loss = -mu * mu * e * e / 4.0 + mu * mu * e / 2.0
        + sqrt2 * mu * sigma * gauss * e / (2.0 * pi.sqrt())
        - sqrt2 * mu * sigma * gauss / (2.0 * pi.sqrt())
        - var * e * e / 4.0
        + var * e / 2.0
        - 3.0 * var * last / (4.0 * pi);
    match form {
        // Cancellation can leave a tiny negative residue far from zero.
        LossForm::Corrected => T::of(loss.max(0.0)),
        LossForm::AsPrinted => T::of(loss),
    }
}

/// Mean of `(relu(z) - p(z))^2` over the samples.
pub fn empirical_loss<T: Real>(samples: &[T], poly: &PolyCoeffs<T>) -> T {
    let mut acc = 0.0f64;
    for &z in samples {
        let d = z.max(T::zero()).as_f64() - poly.eval(z).as_f64();
        acc += d * d;
    }
    T::of(acc / samples.len() as f64)
}

/// Least-squares fit of `relu(z)` onto `{1, z, ..., z^degree}` over the samples.
///
/// Samples are standardized before forming the normal equations, which are
/// solved by Cholesky factorization; the result is mapped back to powers of `z`.
pub fn fit_monte_carlo<T: Real>(samples: &[T], degree: usize) -> Result<PolyCoeffs<T>, DapaError> {
    if degree == 0 {
        return Err(DapaError::Degree);
    }
    let needed = (degree + 1) * 100;
    if samples.len() < needed {
        return Err(DapaError::TooFewSamples {
            needed,
            got: samples.len(),
            degree,
        });
    }
    let n = samples.len() as f64;
    let center = samples.iter().map(|s| s.as_f64()).sum::<f64>() / n;
    let spread = (samples
        .iter()
        .map(|s| (s.as_f64() - center).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(DapaError::Degenerate("sample variance is zero"));
    }

    let k = degree + 1;
    let mut gram = vec![0.0f64; k * k];
    let mut rhs = vec![0.0f64; k];
    let mut powers = vec![0.0f64; 2 * degree + 1];
    for &s in samples {
        let z = s.as_f64();
        let u = (z - center) / spread;
        let target = z.max(0.0);
        let mut p = 1.0;
        for slot in powers.iter_mut() {
            *slot = p;
            p *= u;
        }
        for i in 0..k {
            rhs[i] += target * powers[i];
            for j in 0..k {
                gram[i * k + j] += powers[i + j];
            }
        }
    }
    let standardized = cholesky_solve(&mut gram, &mut rhs, k)?;

    // p(z) = sum_i a_i ((z - center)/spread)^i, expanded into powers of z.
    let mut out = vec![0.0f64; k];
    for (i, &a) in standardized.iter().enumerate() {
        let scale = a / spread.powi(i as i32);
        let mut binom = 1.0f64;
        for j in 0..=i {
            // C(i, j) z^j (-center)^(i-j)
            out[j] += scale * binom * (-center).powi((i - j) as i32);
            binom = binom * (i - j) as f64 / (j + 1) as f64;
        }
    }
    PolyCoeffs::new(out.into_iter().map(T::of).collect())
}

fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>, DapaError> {
    let scale = (0..n).map(|i| a[i * n + i]).fold(0.0f64, f64::max);
    for j in 0..n {
        let mut d = a[j * n + j];
        for p in 0..j {
            d -= a[j * n + p] * a[j * n + p];
        }
        if !(d > scale * 1e-13) {
            return Err(DapaError::Degenerate("normal equations are not positive definite"));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= a[i * n + p] * a[j * n + p];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for p in 0..i {
            s -= a[i * n + p] * b[p];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for p in i + 1..n {
            s -= a[p * n + i] * b[p];
        }
        b[i] = s / a[i * n + i];
    }
    Ok(b.to_vec())
}

/// Closed-form fit per channel from running statistics, clamping tiny variances.
pub fn channelwise_coeffs<T: Real>(stats: &ChannelStats<T>) -> ChannelPolys<T> {
    let floor = T::of(VAR_FLOOR);
    let rows = stats
        .mean()
        .iter()
        .zip(stats.var())
        .map(|(&m, &v)| {
            let v = if v.is_finite() { v.max(floor) } else { floor };
            let m = if m.is_finite() { m } else { T::zero() };
            fit_closed_form(&GaussianStats::new(m, v).expect("clamped variance is positive"))
        })
        .collect();
    ChannelPolys::new(rows)
}
