//! Shadowed-Rician block fading with additive white Gaussian noise.
//!
//! The fading law is expressed on the channel *power* gain `r = |h|²`:
//!
//! ```text
//! f(r) = (2·b0·m / (2·b0·m + Ω))^m · 1/(2·b0) · exp(-r / (2·b0))
//!        · ₁F₁(m; 1; Ω·r / (2·b0·(2·b0·m + Ω)))
//! ```
//!
//! Transmitted tensors carry unit average power, so a link SNR of `γ` dB maps
//! to a per-element noise variance `σ² = 10^(-γ/10)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative size of the next series term below which ₁F₁ summation stops.
pub const HYP1F1_REL_TOL: f64 = 1e-14;
/// Hard cap on the number of ₁F₁ series terms.
pub const HYP1F1_MAX_TERMS: usize = 10_000;

const LOG_RESCALE: f64 = 1e200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Average power of the scatter component.
    pub b0: f64,
    /// Nakagami shape of the line-of-sight amplitude.
    pub m: f64,
    /// Average power of the line-of-sight component.
    pub omega: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            b0: 0.158,
            m: 19.4,
            omega: 1.29,
        }
    }
}

impl ChannelParams {
    pub fn new(b0: f64, m: f64, omega: f64) -> Result<Self> {
        let p = Self { b0, m, omega };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b0.is_finite() && self.b0 > 0.0) {
            return Err(Error::Config(format!("b0 must be > 0, got {}", self.b0)));
        }
        if !(self.m.is_finite() && self.m > 0.0) {
            return Err(Error::Config(format!("m must be > 0, got {}", self.m)));
        }
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return Err(Error::Config(format!("omega must be >= 0, got {}", self.omega)));
        }
        Ok(())
    }

    /// First moment of the power gain, `E[r] = 2·b0 + Ω`.
    pub fn mean_power(&self) -> f64 {
        2.0 * self.b0 + self.omega
    }

    /// Upper bound on `P(r > big_r)`.
    ///
    /// Uses `r ≤ 2A² + 2|Z|²`, the exponential tail of `|Z|²` and the
    /// Chernoff bound of the Gamma-distributed `A²`.
    pub fn tail_bound(&self, big_r: f64) -> f64 {
        let quarter = big_r / 4.0;
        let scatter = (-quarter / (2.0 * self.b0)).exp();
        let los = if self.omega == 0.0 {
            0.0
        } else {
            let ratio = quarter / self.omega;
            if ratio <= 1.0 {
                1.0
            } else {
                (-self.m * (ratio - 1.0 - ratio.ln())).exp()
            }
        };
        (scatter + los).min(1.0)
    }

    /// Smallest `R` (on a doubling-then-bisection search) with `tail_bound(R) < eps`.
    pub fn support_cutoff(&self, eps: f64) -> f64 {
        let mut hi = self.mean_power().max(1.0);
        while self.tail_bound(hi) >= eps {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.tail_bound(mid) < eps {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

/// One block-fading realization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelDraw {
    pub power_gain: f64,
    /// `√power_gain`; the real coefficient `h` applied to the transmitted block.
    pub amplitude: f64,
}

impl ChannelDraw {
    pub fn from_power(power_gain: f64) -> Self {
        Self {
            power_gain,
            amplitude: power_gain.sqrt(),
        }
    }

    pub fn from_amplitude(amplitude: f64) -> Self {
        Self {
            power_gain: amplitude * amplitude,
            amplitude,
        }
    }

    /// Unit-gain channel.
    pub fn unit() -> Self {
        Self::from_amplitude(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub sigma2: f64,
}

impl NoiseSpec {
    pub fn from_snr_db(snr_db: f64) -> Self {
        Self {
            snr_db,
            sigma2: snr_to_sigma2(snr_db),
        }
    }

    pub fn noiseless() -> Self {
        Self {
            snr_db: f64::INFINITY,
            sigma2: 0.0,
        }
    }
}

/// Per-element noise variance for unit-power signals.
pub fn snr_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Kummer's confluent hypergeometric function `₁F₁(a; b; z)` by its ascending series.
pub fn hyp1f1(a: f64, b: f64, z: f64) -> Result<f64> {
    let (mantissa, log_scale) = hyp1f1_scaled(a, b, z)?;
    let v = mantissa * log_scale.exp();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("hyp1f1 overflow at a={a}, z={z}")))
    }
}

/// Series value as `mantissa · exp(log_scale)` so large arguments do not overflow.
fn hyp1f1_scaled(a: f64, b: f64, z: f64) -> Result<(f64, f64)> {
    if b <= 0.0 && b.fract() == 0.0 {
        return Err(Error::Domain(format!(
            "hyp1f1 undefined for non-positive integer b={b}"
        )));
    }
    if !z.is_finite() || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!("hyp1f1 needs finite arguments, got a={a}, b={b}, z={z}")));
    }
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut log_scale = 0.0f64;
    for k in 0..HYP1F1_MAX_TERMS {
        let kf = k as f64;
        term *= (a + kf) * z / ((b + kf) * (kf + 1.0));
        if term == 0.0 {
            return Ok((sum, log_scale));
        }
        sum += term;
        if term.abs() < HYP1F1_REL_TOL * sum.abs() {
            return Ok((sum, log_scale));
        }
        if sum.abs() > LOG_RESCALE {
            sum /= LOG_RESCALE;
            term /= LOG_RESCALE;
            log_scale += LOG_RESCALE.ln();
        }
    }
    Err(Error::Numerical(format!(
        "hyp1f1 series did not converge within {HYP1F1_MAX_TERMS} terms (a={a}, z={z})"
    )))
}

/// Density of the power gain at `r`.
pub fn eval_pdf(params: &ChannelParams, r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::Domain(format!("power gain must be >= 0, got {r}")));
    }
    let ChannelParams { b0, m, omega } = *params;
    let two_b0 = 2.0 * b0;
    let denom = two_b0 * m + omega;
    let log_coef = m * (two_b0 * m / denom).ln() - two_b0.ln() - r / two_b0;
    let z = omega * r / (two_b0 * denom);
    let (mantissa, log_scale) = hyp1f1_scaled(m, 1.0, z)?;
    Ok(mantissa * (log_coef + log_scale).exp())
}

/// `∫_lo^hi f(r) dr` by adaptive Simpson quadrature.
pub fn integrate_pdf(params: &ChannelParams, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let f = |r: f64| eval_pdf(params, r);
    adaptive_simpson(&f, lo, hi, tol, 50)
}

pub(crate) fn adaptive_simpson<F>(f: &F, a: f64, b: f64, tol: f64, max_depth: u32) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    if b <= a {
        return Ok(0.0);
    }
    let fa = f(a)?;
    let fb = f(b)?;
    let m = 0.5 * (a + b);
    let fm = f(m)?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, max_depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    Ok(simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?)
}

/// Kolmogorov–Smirnov distance between the empirical distribution of
/// `samples` and the CDF obtained by integrating [`eval_pdf`].
pub fn ks_statistic(params: &ChannelParams, samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("KS statistic needs at least one sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut cdf = 0.0;
    let mut prev = 0.0;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        cdf += integrate_pdf(params, prev, x, 1e-13)?;
        prev = x;
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
    }
    Ok(d)
}

/// Draws `n` i.i.d. power gains.
///
/// Each draw is `|A·e^{jφ} + Z|²` with `A² ~ Gamma(m, Ω/m)`, `φ` uniform and
/// `Z` circular complex Gaussian with per-axis variance `b0`.
pub fn sample_gain(params: &ChannelParams, seed: u64, n: usize) -> Result<Vec<ChannelDraw>> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Config("sample_gain needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scatter = Normal::new(0.0, params.b0.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let los = if params.omega > 0.0 {
        Some(Gamma::new(params.m, params.omega / params.m).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let draws = (0..n)
        .map(|_| {
            let amp = los.map_or(0.0, |g| g.sample(&mut rng).sqrt());
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let re = amp * phase.cos() + scatter.sample(&mut rng);
            let im = amp * phase.sin() + scatter.sample(&mut rng);
            ChannelDraw::from_power(re * re + im * im)
        })
        .collect();
    Ok(draws)
}

/// i.i.d. zero-mean Gaussian samples with variance `sigma2`.
pub fn gaussian_noise(len: usize, sigma2: f64, seed: u64) -> Vec<f64> {
    if sigma2 == 0.0 {
        return vec![0.0; len];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma2.sqrt()).expect("finite sigma");
    (0..len).map(|_| normal.sample(&mut rng)).collect()
}

/// Returns `h·y + n` (divided by `h` when `equalize` is set).
pub fn apply_channel(
    y: &[f32],
    draw: &ChannelDraw,
    noise: &NoiseSpec,
    seed: u64,
    equalize: bool,
) -> Result<Vec<f32>> {
    let h = draw.amplitude;
    if equalize && h == 0.0 {
        return Err(Error::DegenerateChannel(
            "zero channel amplitude cannot be equalized".into(),
        ));
    }
    if !(noise.sigma2 >= 0.0 && noise.sigma2.is_finite()) {
        return Err(Error::Config(format!("invalid noise variance {}", noise.sigma2)));
    }
    let n = gaussian_noise(y.len(), noise.sigma2, seed);
    let out = y
        .iter()
        .zip(n)
        .map(|(&v, e)| {
            let r = h * v as f64 + e;
            (if equalize { r / h } else { r }) as f32
        })
        .collect();
    Ok(out)
}

/// Keys of the `channel` section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub b0: f64,
    pub m: f64,
    pub omega: f64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub equalize: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        let p = ChannelParams::default();
        Self {
            b0: p.b0,
            m: p.m,
            omega: p.omega,
            snr_db_min: -10.0,
            snr_db_max: 10.0,
            equalize: true,
        }
    }
}

impl ChannelConfig {
    pub fn params(&self) -> ChannelParams {
        ChannelParams {
            b0: self.b0,
            m: self.m,
            omega: self.omega,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        if !(self.snr_db_min < self.snr_db_max) {
            return Err(Error::Config(format!(
                "snr_db_min ({}) must be below snr_db_max ({})",
                self.snr_db_min, self.snr_db_max
            )));
        }
        Ok(())
    }
}
