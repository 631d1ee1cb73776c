//! Pretrained diffusion models used as the distillation teacher.
//!
//! Two kinds: an analytic Gaussian mixture whose ε-prediction is exact, and
//! a neural network trained by standard denoising regression.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{arg, Error, Result};
use crate::nn::{self, AdamConfig, AdamState, Batch, MlpParams, MlpSpec};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::{Label, Scalar};

/// Isotropic Gaussian mixture. Each mode optionally carries a class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec<T> {
    pub weights: Vec<T>,
    pub means: Vec<Vec<T>>,
    pub variances: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

impl<T: Scalar> GmmSpec<T> {
    pub fn new(
        weights: Vec<T>,
        means: Vec<Vec<T>>,
        variances: Vec<T>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let g = Self {
            weights,
            means,
            variances,
            labels,
        };
        g.validate()?;
        Ok(g)
    }

    /// `modes` equal-weight modes evenly spaced on a circle of `radius`.
    /// With `classes = Some(n)`, mode `i` is labeled `i % n`.
    pub fn circle(modes: usize, radius: T, variance: T, classes: Option<usize>) -> Result<Self> {
        if modes == 0 {
            return arg("a mixture needs at least one mode");
        }
        let means = (0..modes)
            .map(|i| {
                let a = T::of(std::f64::consts::TAU * i as f64 / modes as f64);
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        let labels = match classes {
            Some(0) => return arg("class count must be positive"),
            Some(n) => Some((0..modes).map(|i| i % n).collect()),
            None => None,
        };
        Self::new(
            vec![T::one() / T::of(modes as f64); modes],
            means,
            vec![variance; modes],
            labels,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.weights.len();
        if m == 0 {
            return Err(Error::Config("mixture has no modes".into()));
        }
        if self.means.len() != m || self.variances.len() != m {
            return Err(Error::Config(format!(
                "mixture has {m} weights, {} means and {} variances",
                self.means.len(),
                self.variances.len()
            )));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|mu| mu.len() != d) {
            return Err(Error::Config("mode means must share a positive dimension".into()));
        }
        if self.weights.iter().any(|w| !(*w >= T::zero())) {
            return Err(Error::Config("mixture weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().map(|w| w.as_f64()).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        if self.variances.iter().any(|v| !(*v >= T::zero())) {
            return Err(Error::Config("mode variances must be nonnegative".into()));
        }
        if let Some(l) = &self.labels {
            if l.len() != m {
                return Err(Error::Config(format!("{} labels for {m} modes", l.len())));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_modes(&self) -> usize {
        self.weights.len()
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
            .unwrap_or(0)
    }

    /// The sub-mixture of modes labeled `c`; `None` returns the full mixture.
    pub fn condition(&self, c: Label) -> Result<Self> {
        let Some(c) = c else {
            return Ok(self.clone());
        };
        let Some(labels) = &self.labels else {
            return arg(format!("label {c} given to an unlabeled mixture"));
        };
        let keep: Vec<usize> = (0..self.n_modes()).filter(|&i| labels[i] == c).collect();
        let mass: T = keep.iter().map(|&i| self.weights[i]).sum();
        if keep.is_empty() || mass <= T::zero() {
            return arg(format!("label {c} has no modes with positive weight"));
        }
        Ok(Self {
            weights: keep.iter().map(|&i| self.weights[i] / mass).collect(),
            means: keep.iter().map(|&i| self.means[i].clone()).collect(),
            variances: keep.iter().map(|&i| self.variances[i]).collect(),
            labels: Some(vec![c; keep.len()]),
        })
    }

    pub fn translated(&self, offset: &[T]) -> Result<Self> {
        if offset.len() != self.dim() {
            return arg(format!(
                "offset of dimension {} for a {}-dimensional mixture",
                offset.len(),
                self.dim()
            ));
        }
        let mut out = self.clone();
        for mu in &mut out.means {
            for (m, &o) in mu.iter_mut().zip(offset) {
                *m += o;
            }
        }
        Ok(out)
    }

    /// Draws `n` samples; returns them with the index of their generating mode.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> (Array2<T>, Vec<usize>) {
        let d = self.dim();
        let mut x = Array2::zeros((n, d));
        let mut modes = Vec::with_capacity(n);
        for mut row in x.rows_mut() {
            let i = self.pick_mode(rng);
            let sd = self.variances[i].sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.means[i][j] + sd * rng::normal::<T>(rng);
            }
            modes.push(i);
        }
        (x, modes)
    }

    fn pick_mode(&self, rng: &mut Rng) -> usize {
        let u: T = rng::uniform(rng);
        let mut acc = T::zero();
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.iter().rposition(|w| *w > T::zero()).unwrap_or(0)
    }

    /// Log density of the noised marginal `p_t` at `z`.
    pub fn marginal_log_density(&self, schedule: &NoiseSchedule<T>, z: &[T], t: T) -> Result<T> {
        let a = schedule.sqrt_alpha_bar(t)?;
        let sigma = schedule.sigma(t)?;
        let logs = self.component_logs(z, a, sigma)?;
        Ok(log_sum_exp(&logs))
    }

    /// `ln(w_i N(z; a μ_i, s_i² I))` for every mode.
    fn component_logs(&self, z: &[T], a: T, sigma: T) -> Result<Vec<T>> {
        let d = T::of(z.len() as f64);
        let two_pi = T::of(std::f64::consts::TAU);
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((&w, mu), &v)| {
                let s2 = a * a * v + sigma * sigma;
                if s2 <= T::zero() {
                    return Err(Error::Singularity(
                        "zero-variance mode at sigma = 0 has no density".into(),
                    ));
                }
                let dist2: T = z
                    .iter()
                    .zip(mu)
                    .map(|(&zi, &m)| (zi - a * m) * (zi - a * m))
                    .sum();
                Ok(w.ln() - T::of(0.5) * d * (two_pi * s2).ln() - T::of(0.5) * dist2 / s2)
            })
            .collect()
    }
}

fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Exact posterior-mean noise `E[ε | z_t = z]` under the mixture.
pub fn analytic_eps<T: Scalar>(
    gmm: &GmmSpec<T>,
    schedule: &NoiseSchedule<T>,
    z: &[T],
    t: T,
) -> Result<Vec<T>> {
    if z.len() != gmm.dim() {
        return arg(format!(
            "state of dimension {} for a {}-dimensional mixture",
            z.len(),
            gmm.dim()
        ));
    }
    let a = schedule.sqrt_alpha_bar(t)?;
    let sigma = schedule.sigma(t)?;
    let logs = gmm.component_logs(z, a, sigma)?;
    let norm = log_sum_exp(&logs);
    let mut eps = vec![T::zero(); z.len()];
    for (i, &l) in logs.iter().enumerate() {
        let r = (l - norm).exp();
        if r == T::zero() {
            continue;
        }
        let s2 = a * a * gmm.variances[i] + sigma * sigma;
        for (j, e) in eps.iter_mut().enumerate() {
            *e += r * (z[j] - a * gmm.means[i][j]) / s2;
        }
    }
    for e in &mut eps {
        *e *= sigma;
    }
    Ok(eps)
}

/// Noised state `sqrt(1 - σ²(t)) z0 + σ(t) ε`.
pub fn forward_noise<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    z0: &[T],
    t: T,
    eps: &[T],
) -> Result<Vec<T>> {
    if z0.len() != eps.len() {
        return arg(format!(
            "data and noise differ in dimension ({} vs {})",
            z0.len(),
            eps.len()
        ));
    }
    let a = schedule.sqrt_alpha_bar(t)?;
    let s = schedule.sigma(t)?;
    Ok(z0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect())
}

/// What a neural teacher regresses on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    Eps,
    /// `v = sqrt(ᾱ) ε - sqrt(1 - ᾱ) z0`.
    Velocity,
}

#[derive(Debug, Clone)]
pub enum TeacherModel<T> {
    Analytic(GmmSpec<T>),
    Neural {
        spec: MlpSpec,
        params: MlpParams<T>,
        mode: PredictionMode,
    },
}

impl<T: Scalar> TeacherModel<T> {
    pub fn neural(spec: MlpSpec, params: MlpParams<T>, mode: PredictionMode) -> Result<Self> {
        spec.validate()?;
        params.check_spec(&spec)?;
        Ok(TeacherModel::Neural { spec, params, mode })
    }

    pub fn prediction_mode(&self) -> PredictionMode {
        match self {
            TeacherModel::Analytic(_) => PredictionMode::Eps,
            TeacherModel::Neural { mode, .. } => *mode,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TeacherModel::Analytic(g) => g.num_classes(),
            TeacherModel::Neural { spec, .. } => spec.num_classes,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TeacherModel::Analytic(g) => g.dim(),
            TeacherModel::Neural { spec, .. } => spec.in_dim,
        }
    }

    /// Raw prediction in the teacher's own mode, one row per state.
    pub fn predict(
        &self,
        schedule: &NoiseSchedule<T>,
        z: ArrayView2<T>,
        t: &[T],
        c: &[Label],
    ) -> Result<Array2<T>> {
        match self {
            TeacherModel::Analytic(gmm) => {
                if t.len() != z.nrows() || c.len() != z.nrows() {
                    return arg("times and labels must match the batch size");
                }
                let mut out = Array2::zeros(z.raw_dim());
                let mut cached: Option<(Label, GmmSpec<T>)> = None;
                for (i, row) in z.rows().into_iter().enumerate() {
                    if cached.as_ref().map(|(l, _)| *l) != Some(c[i]) {
                        cached = Some((c[i], gmm.condition(c[i])?));
                    }
                    let sub = &cached.as_ref().unwrap().1;
                    let zi: Vec<T> = row.to_vec();
                    let e = analytic_eps(sub, schedule, &zi, t[i])?;
                    out.row_mut(i).assign(&ndarray::ArrayView1::from(&e));
                }
                Ok(out)
            }
            TeacherModel::Neural { spec, params, .. } => nn::forward(params, spec, z, t, c),
        }
    }

    /// ε-prediction regardless of the teacher's mode.
    pub fn eps(
        &self,
        schedule: &NoiseSchedule<T>,
        z: ArrayView2<T>,
        t: &[T],
        c: &[Label],
    ) -> Result<Array2<T>> {
        let mut out = self.predict(schedule, z, t, c)?;
        if self.prediction_mode() == PredictionMode::Velocity {
            // ε = sqrt(ᾱ) v + σ z
            for ((mut row, zr), &ti) in out.rows_mut().into_iter().zip(z.rows()).zip(t) {
                let a = schedule.sqrt_alpha_bar(ti)?;
                let s = schedule.sigma(ti)?;
                row.zip_mut_with(&zr, |v, &zi| *v = a * *v + s * zi);
            }
        }
        Ok(out)
    }
}

/// Denoising-regression settings for a neural teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub mode: PredictionMode,
    /// Probability of replacing a label by the null label.
    pub cond_dropout: f64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 256,
            adam: AdamConfig::with_lr(2e-4),
            mode: PredictionMode::Eps,
            cond_dropout: 0.1,
        }
    }
}

impl TeacherTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("cond_dropout must lie in [0, 1]".into()));
        }
        self.adam.validate()
    }
}

/// A neural teacher being trained; the single writer of its parameters.
#[derive(Debug, Clone)]
pub struct TeacherTrainer<T> {
    pub spec: MlpSpec,
    pub params: MlpParams<T>,
    pub adam: AdamState<T>,
    pub mode: PredictionMode,
    pub cond_dropout: f64,
}

impl<T: Scalar> TeacherTrainer<T> {
    pub fn new(spec: MlpSpec, config: &TeacherTrainConfig, rng: &mut Rng) -> Result<Self> {
        let params = MlpParams::init(&spec, rng)?;
        Self::from_params(spec, params, config)
    }

    /// Continues training from existing parameters (fresh optimizer state).
    pub fn from_params(spec: MlpSpec, params: MlpParams<T>, config: &TeacherTrainConfig) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        params.check_spec(&spec)?;
        Ok(Self {
            adam: AdamState::new(config.adam, &params),
            spec,
            params,
            mode: config.mode,
            cond_dropout: config.cond_dropout,
        })
    }

    /// Builds the regression batch for clean data `z0` with labels `c`.
    pub fn make_batch(
        &self,
        schedule: &NoiseSchedule<T>,
        z0: ArrayView2<T>,
        c: &[Label],
        rng: &mut Rng,
    ) -> Result<Batch<T>> {
        let n = z0.nrows();
        if n == 0 {
            return arg("empty batch");
        }
        if c.len() != n {
            return arg("labels must match the batch size");
        }
        let d = z0.ncols();
        let mut z = Array2::zeros((n, d));
        let mut target = Array2::zeros((n, d));
        let mut times = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            // (0, 1]
            let t = T::one() - rng::uniform::<T>(rng);
            let a = schedule.sqrt_alpha_bar(t)?;
            let s = schedule.sigma(t)?;
            for j in 0..d {
                let e: T = rng::normal(rng);
                let x = z0[[i, j]];
                z[[i, j]] = a * x + s * e;
                target[[i, j]] = match self.mode {
                    PredictionMode::Eps => e,
                    PredictionMode::Velocity => a * e - s * x,
                };
            }
            let dropped = c[i].is_some() && rng::bernoulli(self.cond_dropout, rng);
            labels.push(if dropped { None } else { c[i] });
            times.push(t);
        }
        Ok(Batch {
            z,
            t: times,
            c: labels,
            target,
        })
    }

    /// One denoising-regression update; returns the batch loss.
    pub fn train_step(
        &mut self,
        schedule: &NoiseSchedule<T>,
        z0: ArrayView2<T>,
        c: &[Label],
        rng: &mut Rng,
    ) -> Result<T> {
        let batch = self.make_batch(schedule, z0, c, rng)?;
        let (loss, grads) = nn::loss_and_grad(&self.params, &self.spec, &batch)?;
        nn::adam_step(&mut self.params, &grads, &mut self.adam)?;
        Ok(loss)
    }

    /// Runs `steps` updates on minibatches drawn with replacement from `data`.
    /// Returns the mean loss of every block of `log_every` steps.
    pub fn fit(
        &mut self,
        schedule: &NoiseSchedule<T>,
        data: &Dataset<T>,
        steps: usize,
        batch_size: usize,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        let log_every = 500;
        let mut losses = Vec::new();
        let mut acc = 0.0;
        for step in 0..steps {
            let (z0, c) = data.minibatch(batch_size, rng)?;
            acc += self.train_step(schedule, z0.view(), &c, rng)?.as_f64();
            if (step + 1) % log_every == 0 || step + 1 == steps {
                let n = (step % log_every) + 1;
                losses.push(acc / n as f64);
                acc = 0.0;
            }
        }
        Ok(losses)
    }

    pub fn into_model(self) -> TeacherModel<T> {
        TeacherModel::Neural {
            spec: self.spec,
            params: self.params,
            mode: self.mode,
        }
    }

    pub fn model(&self) -> TeacherModel<T> {
        self.clone().into_model()
    }
}

/// Trains a neural teacher from scratch on `data`.
pub fn train_teacher<T: Scalar>(
    spec: MlpSpec,
    schedule: &NoiseSchedule<T>,
    data: &Dataset<T>,
    config: &TeacherTrainConfig,
    rng: &mut Rng,
) -> Result<TeacherTrainer<T>> {
    if data.dim() != spec.in_dim {
        return Err(Error::Config(format!(
            "dataset dimension {} does not match network input {}",
            data.dim(),
            spec.in_dim
        )));
    }
    let mut trainer = TeacherTrainer::new(spec, config, rng)?;
    trainer.fit(schedule, data, config.steps, config.batch_size, rng)?;
    Ok(trainer)
}

/// Continues training a neural teacher on a (typically customized) dataset.
pub fn finetune<T: Scalar>(
    spec: MlpSpec,
    params: MlpParams<T>,
    schedule: &NoiseSchedule<T>,
    data: &Dataset<T>,
    config: &TeacherTrainConfig,
    steps: usize,
    rng: &mut Rng,
) -> Result<MlpParams<T>> {
    let mut trainer = TeacherTrainer::from_params(spec, params, config)?;
    trainer.fit(schedule, data, steps, config.batch_size, rng)?;
    Ok(trainer.params)
}
