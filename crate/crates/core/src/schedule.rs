//! Noise schedule, time windows and the ε-parameterizations of a window.
//!
//! Time runs from `t = 1` (noise) to `t = 0` (data). A partition splits
//! `[0, 1]` into `K` windows; window `k` (1-based) is the half-open interval
//! `(t_{k-1}, t_k]`, with `t = 0` assigned to window 1.
//!
//! Inside a window the piecewise flow relates its endpoints affinely through
//! an ε-like quantity, `z_{t_{k-1}} = λ_k z_{t_k} + η_k ε`. The coefficients
//! come from one of two parameterizations ([`params_a`], [`params_b`]), or
//! from the velocity parameterization, which is the special case
//! `λ = 1, η = -(t_k - t_{k-1})` where the "ε" is the chord velocity itself.

use serde::{Deserialize, Serialize};

use crate::error::{arg, domain, Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `ᾱ(t) = exp(-(β_min t + ½(β_max - β_min) t²))`.
    VpLinear,
    /// `σ(t) = sin(θ t)` with `θ` chosen so that `ᾱ(1)` equals the
    /// vp-linear terminal value for the same rates.
    Cosine,
}

/// Continuous variance-preserving schedule on `t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule<T> {
    pub kind: ScheduleKind,
    pub beta_min: T,
    pub beta_max: T,
}

impl<T: Scalar> Default for NoiseSchedule<T> {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::VpLinear,
            beta_min: T::of(0.1),
            beta_max: T::of(20.0),
        }
    }
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn new(kind: ScheduleKind, beta_min: T, beta_max: T) -> Result<Self> {
        let s = Self {
            kind,
            beta_min,
            beta_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn vp_linear(beta_min: T, beta_max: T) -> Result<Self> {
        Self::new(ScheduleKind::VpLinear, beta_min, beta_max)
    }

    pub fn cosine(beta_min: T, beta_max: T) -> Result<Self> {
        Self::new(ScheduleKind::Cosine, beta_min, beta_max)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beta_min.is_finite()
            && self.beta_max.is_finite()
            && self.beta_min >= T::zero()
            && self.beta_max >= T::zero()
            && self.beta_min + self.beta_max > T::zero();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "schedule rates must be finite, nonnegative and not both zero (beta_min={}, beta_max={})",
                self.beta_min, self.beta_max
            )))
        }
    }

    fn check(&self, t: T) -> Result<()> {
        if t >= T::zero() && t <= T::one() {
            Ok(())
        } else {
            domain(format!("time {t} outside [0, 1]"))
        }
    }

    /// Integrated rate `∫₀ᵗ β`, i.e. `-ln ᾱ(t)` for vp-linear.
    fn integrated_rate(&self, t: T) -> T {
        self.beta_min * t + T::of(0.5) * (self.beta_max - self.beta_min) * t * t
    }

    /// Angular speed of the cosine schedule.
    fn theta_max(&self) -> T {
        let terminal = (-self.integrated_rate(T::one()) * T::of(0.5)).exp();
        terminal.acos()
    }

    /// `σ(t)` without the domain check.
    pub(crate) fn sigma_unchecked(&self, t: T) -> T {
        match self.kind {
            ScheduleKind::VpLinear => (-(-self.integrated_rate(t)).exp_m1()).sqrt(),
            ScheduleKind::Cosine => (self.theta_max() * t).sin(),
        }
    }

    /// `sqrt(ᾱ(t))` without the domain check.
    pub(crate) fn sqrt_alpha_bar_unchecked(&self, t: T) -> T {
        match self.kind {
            ScheduleKind::VpLinear => (-self.integrated_rate(t) * T::of(0.5)).exp(),
            ScheduleKind::Cosine => (self.theta_max() * t).cos(),
        }
    }

    pub fn sigma(&self, t: T) -> Result<T> {
        self.check(t)?;
        Ok(self.sigma_unchecked(t))
    }

    pub fn alpha_bar(&self, t: T) -> Result<T> {
        self.check(t)?;
        let a = self.sqrt_alpha_bar_unchecked(t);
        Ok(a * a)
    }

    pub fn sqrt_alpha_bar(&self, t: T) -> Result<T> {
        self.check(t)?;
        Ok(self.sqrt_alpha_bar_unchecked(t))
    }

    /// Coefficients `(c_z, c_ε)` of the probability-flow velocity
    /// `dz/dt = c_z z + c_ε ε̂(z, t)` for this schedule.
    ///
    /// `c_z = a'/a` and `c_ε = σ' - (a'/a) σ` with `a = sqrt(ᾱ)`. Singular at
    /// `t = 0` because `σ'` diverges there.
    pub fn ode_coefficients(&self, t: T) -> Result<(T, T)> {
        self.check(t)?;
        let half = T::of(0.5);
        match self.kind {
            ScheduleKind::VpLinear => {
                let sigma = self.sigma_unchecked(t);
                if sigma <= T::zero() {
                    return Err(Error::Singularity(
                        "probability-flow velocity diverges at sigma = 0".into(),
                    ));
                }
                let beta = self.beta_min + (self.beta_max - self.beta_min) * t;
                Ok((-half * beta, half * beta / sigma))
            }
            ScheduleKind::Cosine => {
                let theta = self.theta_max();
                let (s, c) = (theta * t).sin_cos();
                Ok((-theta * s / c, theta / c))
            }
        }
    }
}

/// The `K` time windows, stored as boundaries `[t_K = 1, …, t_0 = 0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPartition<T> {
    boundaries: Vec<T>,
}

impl<T: Scalar> WindowPartition<T> {
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return arg("window count must be at least 1");
        }
        let kf = T::of(k as f64);
        let boundaries = (0..=k)
            .rev()
            .map(|j| T::of(j as f64) / kf)
            .collect();
        Ok(Self { boundaries })
    }

    /// Builds a partition from explicit boundaries in decreasing order.
    pub fn from_boundaries(boundaries: Vec<T>) -> Result<Self> {
        if boundaries.len() < 2 {
            return arg("a partition needs at least two boundaries");
        }
        if boundaries[0] != T::one() || *boundaries.last().unwrap() != T::zero() {
            return arg("partition boundaries must start at 1 and end at 0");
        }
        if boundaries.windows(2).any(|w| w[1] >= w[0]) {
            return arg("partition boundaries must be strictly decreasing");
        }
        Ok(Self { boundaries })
    }

    pub fn k(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Boundaries in decreasing order, `t_K` first.
    pub fn boundaries(&self) -> &[T] {
        &self.boundaries
    }

    /// `t_j` for `j ∈ 0..=K`.
    pub fn time(&self, j: usize) -> T {
        self.boundaries[self.k() - j]
    }

    /// Window `k` (1-based) as `(t_k, t_{k-1})`.
    pub fn window(&self, k: usize) -> Result<Window<T>> {
        if k == 0 || k > self.k() {
            return arg(format!("window index {k} outside 1..={}", self.k()));
        }
        Ok(Window {
            k,
            t_hi: self.time(k),
            t_lo: self.time(k - 1),
        })
    }

    /// Index of the unique window with `t ∈ (t_{k-1}, t_k]`; `t = 0` maps to 1.
    pub fn window_of(&self, t: T) -> Result<usize> {
        if !(t >= T::zero() && t <= T::one()) {
            return domain(format!("time {t} outside [0, 1]"));
        }
        let k = self.k();
        Ok((1..=k)
            .find(|&j| t > self.time(j - 1) && t <= self.time(j))
            .unwrap_or(1))
    }

    /// Interior boundaries `t_{K-1}, …, t_1`.
    pub fn interior(&self) -> &[T] {
        &self.boundaries[1..self.k()]
    }
}

/// One window `(t_lo, t_hi]` of a partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window<T> {
    pub k: usize,
    pub t_hi: T,
    pub t_lo: T,
}

impl<T: Scalar> Window<T> {
    pub fn width(&self) -> T {
        self.t_hi - self.t_lo
    }

    pub fn contains(&self, t: T) -> bool {
        t >= self.t_lo && t <= self.t_hi
    }
}

/// How the student's output relates to the window chord.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// ε-prediction with coefficients from [`params_a`].
    ParamA,
    /// ε-prediction with DDIM-consistent coefficients from [`params_b`].
    ParamB,
    /// Direct velocity prediction.
    Velocity,
}

impl TargetMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetMode::ParamA => "param-A",
            TargetMode::ParamB => "param-B",
            TargetMode::Velocity => "velocity",
        }
    }
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "param-a" | "a" => Ok(TargetMode::ParamA),
            "param-b" | "b" => Ok(TargetMode::ParamB),
            "velocity" | "v" => Ok(TargetMode::Velocity),
            other => arg(format!("unknown target mode {other:?}")),
        }
    }
}

/// Affine coefficients of one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowParams<T> {
    pub k: usize,
    pub t_hi: T,
    pub t_lo: T,
    pub lambda: T,
    pub eta: T,
    pub mode: TargetMode,
}

impl<T: Scalar> WindowParams<T> {
    pub fn new(schedule: &NoiseSchedule<T>, window: Window<T>, mode: TargetMode) -> Result<Self> {
        let (lambda, eta) = match mode {
            TargetMode::ParamA => params_a(schedule, window.t_hi, window.t_lo)?,
            TargetMode::ParamB => params_b(schedule, window.t_hi, window.t_lo)?,
            TargetMode::Velocity => {
                check_window_times(window.t_hi, window.t_lo)?;
                if window.width() <= T::zero() {
                    return Err(Error::DegenerateWindow(format!(
                        "window {} has zero width",
                        window.k
                    )));
                }
                (T::one(), -window.width())
            }
        };
        Ok(Self {
            k: window.k,
            t_hi: window.t_hi,
            t_lo: window.t_lo,
            lambda,
            eta,
            mode,
        })
    }

    /// Coefficients for every window of `partition`, index `k - 1`.
    ///
    /// Fails on the first degenerate or singular window, so a bad
    /// configuration is caught before training starts.
    pub fn for_partition(
        schedule: &NoiseSchedule<T>,
        partition: &WindowPartition<T>,
        mode: TargetMode,
    ) -> Result<Vec<Self>> {
        (1..=partition.k())
            .map(|k| Self::new(schedule, partition.window(k)?, mode))
            .collect()
    }

    pub fn window(&self) -> Window<T> {
        Window {
            k: self.k,
            t_hi: self.t_hi,
            t_lo: self.t_lo,
        }
    }

    /// The ε-target `(z_{t_{k-1}} - λ z_{t_k}) / η` for one coordinate.
    #[inline]
    pub fn eps_target(&self, z_hi: T, z_lo: T) -> T {
        (z_lo - self.lambda * z_hi) / self.eta
    }

    /// Denominator of the ε→velocity conversion at time `t`.
    #[inline]
    pub fn velocity_denominator(&self, t: T) -> T {
        (t - self.t_lo) + self.lambda * (self.t_hi - t)
    }
}

fn check_window_times<T: Scalar>(t_hi: T, t_lo: T) -> Result<()> {
    let unit = |t: T| t >= T::zero() && t <= T::one();
    if !unit(t_hi) || !unit(t_lo) {
        return domain(format!("window times ({t_hi}, {t_lo}) outside [0, 1]"));
    }
    if t_lo > t_hi {
        return arg(format!("window end {t_lo} exceeds window start {t_hi}"));
    }
    Ok(())
}

/// Parameterization A from the noise levels of a window.
pub fn params_a_from_sigmas<T: Scalar>(sigma_hi: T, sigma_lo: T) -> Result<(T, T)> {
    if sigma_hi * sigma_hi <= sigma_lo * sigma_lo {
        return Err(Error::DegenerateWindow(format!(
            "sigma does not increase across the window ({sigma_lo} -> {sigma_hi}); eta would vanish"
        )));
    }
    params_a_from_alpha_bars(
        T::one() - sigma_hi * sigma_hi,
        T::one() - sigma_lo * sigma_lo,
    )
}

/// Parameterization A written in `ᾱ = 1 - σ²`.
///
/// `σ_k² - σ_{k-1}²` is evaluated as `ᾱ_{k-1} - ᾱ_k` and `λ` with the same
/// expression as [`params_b_from_alpha_bars`], so both parameterizations
/// return bit-identical `λ`.
pub fn params_a_from_alpha_bars<T: Scalar>(alpha_bar_hi: T, alpha_bar_lo: T) -> Result<(T, T)> {
    if alpha_bar_hi <= T::zero() {
        return Err(Error::Singularity(
            "sigma reaches 1 at window start; no signal left".into(),
        ));
    }
    if alpha_bar_lo <= alpha_bar_hi {
        return Err(Error::DegenerateWindow(
            "sigma does not increase across the window; eta would vanish".into(),
        ));
    }
    let lambda = alpha_bar_lo.sqrt() / alpha_bar_hi.sqrt();
    let eta = -(alpha_bar_lo - alpha_bar_hi).sqrt() / alpha_bar_hi.sqrt();
    Ok((lambda, eta))
}

/// Parameterization B (DDIM-consistent) from the `ᾱ` values of a window.
pub fn params_b_from_alpha_bars<T: Scalar>(alpha_bar_hi: T, alpha_bar_lo: T) -> Result<(T, T)> {
    if alpha_bar_hi <= T::zero() {
        return Err(Error::Singularity(
            "alpha_bar vanishes at window start".into(),
        ));
    }
    let lambda = alpha_bar_lo.sqrt() / alpha_bar_hi.sqrt();
    let eta = (T::one() - alpha_bar_lo).sqrt() - lambda * (T::one() - alpha_bar_hi).sqrt();
    if eta == T::zero() {
        return Err(Error::DegenerateWindow(
            "eta vanishes for this window".into(),
        ));
    }
    Ok((lambda, eta))
}

/// `(λ, η)` of parameterization A for the window `(t_lo, t_hi]`.
pub fn params_a<T: Scalar>(schedule: &NoiseSchedule<T>, t_hi: T, t_lo: T) -> Result<(T, T)> {
    check_window_times(t_hi, t_lo)?;
    params_a_from_alpha_bars(schedule.alpha_bar(t_hi)?, schedule.alpha_bar(t_lo)?)
}

/// `(λ, η)` of parameterization B for the window `(t_lo, t_hi]`.
pub fn params_b<T: Scalar>(schedule: &NoiseSchedule<T>, t_hi: T, t_lo: T) -> Result<(T, T)> {
    check_window_times(t_hi, t_lo)?;
    params_b_from_alpha_bars(schedule.alpha_bar(t_hi)?, schedule.alpha_bar(t_lo)?)
}

/// Point on the chord between `z_hi = z_{t_k}` and `z_lo = z_{t_{k-1}}` at time `t`.
pub fn chord_interpolate<T: Scalar>(
    z_hi: &[T],
    z_lo: &[T],
    t: T,
    window: Window<T>,
) -> Result<Vec<T>> {
    if z_hi.len() != z_lo.len() {
        return arg(format!(
            "chord endpoints differ in dimension ({} vs {})",
            z_hi.len(),
            z_lo.len()
        ));
    }
    if !window.contains(t) {
        return domain(format!(
            "time {t} outside window [{}, {}]",
            window.t_lo, window.t_hi
        ));
    }
    let (w_hi, w_lo) = chord_weights(t, window);
    Ok(z_hi
        .iter()
        .zip(z_lo)
        .map(|(&a, &b)| w_hi * a + w_lo * b)
        .collect())
}

#[inline]
pub(crate) fn chord_weights<T: Scalar>(t: T, window: Window<T>) -> (T, T) {
    let width = window.width();
    ((t - window.t_lo) / width, (window.t_hi - t) / width)
}

/// Velocity of the piecewise flow implied by an ε-prediction at `(z_t, t)`.
pub fn eps_to_velocity<T: Scalar>(
    z: &[T],
    eps_hat: &[T],
    t: T,
    params: &WindowParams<T>,
) -> Result<Vec<T>> {
    if z.len() != eps_hat.len() {
        return arg(format!(
            "state and prediction differ in dimension ({} vs {})",
            z.len(),
            eps_hat.len()
        ));
    }
    if !params.window().contains(t) {
        return domain(format!(
            "time {t} outside window [{}, {}]",
            params.t_lo, params.t_hi
        ));
    }
    let denom = params.velocity_denominator(t);
    if denom <= T::zero() {
        return Err(Error::Numeric(format!(
            "velocity denominator {denom} is not positive"
        )));
    }
    let keep = T::one() - params.lambda;
    Ok(z
        .iter()
        .zip(eps_hat)
        .map(|(&zi, &ei)| (keep * zi - params.eta * ei) / denom)
        .collect())
}
