//! Piecewise reflow distillation of a teacher into a K-window student.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{arg, Error, Result};
use crate::nn::{self, AdamConfig, AdamState, Batch, MlpParams, MlpSpec};
use crate::rng::{self, Rng};
use crate::schedule::{NoiseSchedule, TargetMode, WindowParams, WindowPartition};
use crate::solver::solve_window_with_scales;
use crate::teacher::TeacherModel;
use crate::{Label, Scalar};

/// How guidance enters the teacher's endpoint solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CfgMode {
    /// Teacher solved with `w = 1`; guidance is applied at sampling time.
    Sync,
    /// Teacher solved with a fixed `w*`, baked into the student.
    Fixed,
}

impl CfgMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CfgMode::Sync => "sync",
            CfgMode::Fixed => "fixed",
        }
    }
}

impl std::str::FromStr for CfgMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(CfgMode::Sync),
            "fixed" => Ok(CfgMode::Fixed),
            _ => Err(Error::Argument(format!("unknown cfg mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub k: usize,
    pub target_mode: TargetMode,
    pub cfg_mode: CfgMode,
    pub w_star: f64,
    pub inner_substeps: usize,
    pub cond_dropout: f64,
    /// Share of items placed exactly at `t_k`, where the sampler queries.
    pub boundary_fraction: f64,
    /// Decay of the weight average used for sampling; 0 samples the raw weights.
    pub ema_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub adam: AdamConfig,
    pub log_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            k: 4,
            target_mode: TargetMode::ParamB,
            cfg_mode: CfgMode::Sync,
            w_star: 2.0,
            inner_substeps: 8,
            cond_dropout: 0.1,
            boundary_fraction: 0.25,
            ema_decay: 0.999,
            batch_size: 256,
            total_steps: 20_000,
            adam: AdamConfig::with_lr(1e-4),
            log_every: 500,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("window count k must be positive".into());
        }
        if self.inner_substeps == 0 {
            return bad("inner_substeps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad(format!("cond_dropout {} outside [0, 1]", self.cond_dropout));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        if !(0.0..=1.0).contains(&self.boundary_fraction) {
            return bad(format!("boundary_fraction {} outside [0, 1]", self.boundary_fraction));
        }
        if self.cfg_mode == CfgMode::Fixed && !(self.w_star > 1.0 && self.w_star.is_finite()) {
            return bad(format!("cfg-fixed needs w_star > 1, got {}", self.w_star));
        }
        self.adam.validate()?;
        Ok(())
    }

    /// Guidance scale of the teacher solve for an item with label `c`.
    pub fn solve_scale(&self, c: Label) -> f64 {
        match (self.cfg_mode, c) {
            (CfgMode::Fixed, Some(_)) => self.w_star,
            _ => 1.0,
        }
    }
}

/// A piecewise-flow student: the network plus the parameterization it was trained in.
#[derive(Debug, Clone)]
pub struct FlowModel<T> {
    pub spec: MlpSpec,
    pub params: MlpParams<T>,
    pub mode: TargetMode,
}

impl<T: Scalar> FlowModel<T> {
    pub fn new(spec: MlpSpec, params: MlpParams<T>, mode: TargetMode) -> Result<Self> {
        spec.validate()?;
        params.check_spec(&spec)?;
        Ok(Self { spec, params, mode })
    }

    pub fn predict(&self, z: ArrayView2<T>, t: &[T], c: &[Label]) -> Result<Array2<T>> {
        nn::forward(&self.params, &self.spec, z, t, c)
    }
}

/// Everything a distillation run mutates.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub spec: MlpSpec,
    pub student: MlpParams<T>,
    /// Moving average of `student`, present when `ema_decay > 0`.
    pub ema: Option<MlpParams<T>>,
    pub teacher: TeacherModel<T>,
    pub adam: AdamState<T>,
    pub step: usize,
    /// Exponential moving average of the batch loss.
    pub loss_ema: Option<f64>,
    pub seed: u64,
    pub rng: Rng,
}

impl<T: Scalar> TrainState<T> {
    /// Starts from `θ = φ` when the teacher is a network of the same
    /// architecture, otherwise from a fresh initialization.
    pub fn new(teacher: TeacherModel<T>, spec: MlpSpec, config: &DistillConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if spec.in_dim != teacher.dim() {
            return Err(Error::Config(format!(
                "student input {} does not match teacher dimension {}",
                spec.in_dim,
                teacher.dim()
            )));
        }
        let mut rng = rng::seeded(seed);
        let student = match &teacher {
            TeacherModel::Neural { spec: ts, params, .. } if *ts == spec => params.clone(),
            _ => MlpParams::init(&spec, &mut rng)?,
        };
        Ok(Self {
            adam: AdamState::new(config.adam, &student),
            ema: (config.ema_decay > 0.0).then(|| student.clone()),
            spec,
            student,
            teacher,
            step: 0,
            loss_ema: None,
            seed,
            rng,
        })
    }

    /// The weights to sample with: the average if kept, else the raw weights.
    pub fn sampling_params(&self) -> &MlpParams<T> {
        self.ema.as_ref().unwrap_or(&self.student)
    }

    pub fn model(&self, mode: TargetMode) -> FlowModel<T> {
        FlowModel {
            spec: self.spec.clone(),
            params: self.sampling_params().clone(),
            mode,
        }
    }
}

/// The regression batch of one distillation step and the window index of each item.
pub struct DistillBatch<T> {
    pub batch: Batch<T>,
    pub windows: Vec<usize>,
}

/// Builds the distillation targets for clean data `z0` with labels `c`.
pub fn make_distill_batch<T: Scalar>(
    teacher: &TeacherModel<T>,
    config: &DistillConfig,
    schedule: &NoiseSchedule<T>,
    params: &[WindowParams<T>],
    z0: ArrayView2<T>,
    c: &[Label],
    rng: &mut Rng,
) -> Result<DistillBatch<T>> {
    let n = z0.nrows();
    if n == 0 {
        return arg("empty batch");
    }
    if c.len() != n {
        return arg("labels must match the batch size");
    }
    let d = z0.ncols();
    let mut z_hi = Array2::zeros((n, d));
    let mut t_hi = Vec::with_capacity(n);
    let mut t_lo = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    let mut windows = Vec::with_capacity(n);
    for i in 0..n {
        let wp = &params[rng::index(params.len(), rng)];
        // (t_{k-1}, t_k]
        let u = T::one() - rng::uniform::<T>(rng);
        let ti = if rng::bernoulli(config.boundary_fraction, rng) {
            wp.t_hi
        } else {
            (wp.t_lo + u * (wp.t_hi - wp.t_lo)).min(wp.t_hi)
        };
        let a = schedule.sqrt_alpha_bar(wp.t_hi)?;
        let s = schedule.sigma(wp.t_hi)?;
        for j in 0..d {
            let e: T = rng::normal(rng);
            z_hi[[i, j]] = a * z0[[i, j]] + s * e;
        }
        let dropped = c[i].is_some() && rng::bernoulli(config.cond_dropout, rng);
        let ci = if dropped { None } else { c[i] };
        scales.push(T::of(config.solve_scale(ci)));
        labels.push(ci);
        t_hi.push(wp.t_hi);
        t_lo.push(wp.t_lo);
        t.push(ti);
        windows.push(wp.k);
    }
    let guided = config.cfg_mode == CfgMode::Fixed;
    let z_lo = solve_window_with_scales(
        teacher,
        schedule,
        z_hi.view(),
        &t_hi,
        &t_lo,
        &labels,
        config.inner_substeps,
        guided.then_some(scales.as_slice()),
    )?;
    let mut z_t = Array2::zeros((n, d));
    let mut target = Array2::zeros((n, d));
    for i in 0..n {
        let wp = &params[windows[i] - 1];
        let width = wp.t_hi - wp.t_lo;
        let (w_hi, w_lo) = ((t[i] - wp.t_lo) / width, (wp.t_hi - t[i]) / width);
        for j in 0..d {
            let (hi, lo) = (z_hi[[i, j]], z_lo[[i, j]]);
            z_t[[i, j]] = w_hi * hi + w_lo * lo;
            target[[i, j]] = match wp.mode {
                TargetMode::Velocity => (hi - lo) / width,
                _ => wp.eps_target(hi, lo),
            };
        }
    }
    Ok(DistillBatch {
        batch: Batch {
            z: z_t,
            t,
            c: labels,
            target,
        },
        windows,
    })
}

/// Outcome of one update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub window_hist: Vec<usize>,
}

/// Per-window coefficients after checking that the partition matches the config.
pub fn window_params<T: Scalar>(
    config: &DistillConfig,
    schedule: &NoiseSchedule<T>,
    partition: &WindowPartition<T>,
) -> Result<Vec<WindowParams<T>>> {
    if partition.k() != config.k {
        return Err(Error::Config(format!(
            "partition has {} windows but the config asks for {}",
            partition.k(),
            config.k
        )));
    }
    WindowParams::for_partition(schedule, partition, config.target_mode).map_err(|e| match e {
        Error::DegenerateWindow(m) | Error::Singularity(m) => Error::Config(m),
        e => e,
    })
}

fn labels_for(spec: &MlpSpec, c: Vec<Label>) -> Vec<Label> {
    if spec.num_classes == 0 {
        vec![None; c.len()]
    } else {
        c
    }
}

/// One update on a minibatch drawn from `data` with the state's generator.
///
/// Labels are ignored when the student has no classes.
pub fn distill_step<T: Scalar>(
    state: &mut TrainState<T>,
    config: &DistillConfig,
    schedule: &NoiseSchedule<T>,
    params: &[WindowParams<T>],
    data: &Dataset<T>,
) -> Result<LogRecord> {
    let (z0, c) = data.minibatch(config.batch_size, &mut state.rng)?;
    let c = labels_for(&state.spec, c);
    let db = make_distill_batch(&state.teacher, config, schedule, params, z0.view(), &c, &mut state.rng)?;
    let (loss, grads) = nn::loss_and_grad(&state.student, &state.spec, &db.batch)?;
    nn::adam_step(&mut state.student, &grads, &mut state.adam)?;
    if let Some(ema) = state.ema.as_mut() {
        let d = T::of(config.ema_decay);
        for (name, avg) in ema.iter_mut() {
            avg.zip_mut_with(state.student.get(name).expect("same names"), |a, &p| *a = d * *a + (T::one() - d) * p);
        }
    }
    state.step += 1;
    let loss = loss.as_f64();
    state.loss_ema = Some(match state.loss_ema {
        Some(m) => 0.99 * m + 0.01 * loss,
        None => loss,
    });
    let mut hist = vec![0; params.len()];
    for k in db.windows {
        hist[k - 1] += 1;
    }
    Ok(LogRecord {
        step: state.step,
        loss,
        window_hist: hist,
    })
}

/// Runs `config.total_steps - state.step` updates, calling `on_log` every
/// `config.log_every` steps (and after the last) with the mean loss and the
/// window histogram of that block.
pub fn distill<T: Scalar>(
    state: &mut TrainState<T>,
    config: &DistillConfig,
    schedule: &NoiseSchedule<T>,
    partition: &WindowPartition<T>,
    data: &Dataset<T>,
    mut on_log: impl FnMut(&LogRecord, &TrainState<T>) -> Result<()>,
) -> Result<Vec<LogRecord>> {
    config.validate()?;
    if data.dim() != state.spec.in_dim {
        return Err(Error::Config(format!(
            "dataset dimension {} does not match the student input {}",
            data.dim(),
            state.spec.in_dim
        )));
    }
    let params = window_params(config, schedule, partition)?;
    let mut logs = Vec::new();
    let mut loss = 0.0;
    let mut count = 0;
    let mut hist = vec![0; config.k];
    while state.step < config.total_steps {
        let rec = distill_step(state, config, schedule, &params, data)?;
        loss += rec.loss;
        count += 1;
        hist.iter_mut().zip(&rec.window_hist).for_each(|(h, r)| *h += r);
        if state.step % config.log_every == 0 || state.step == config.total_steps {
            let block = LogRecord {
                step: state.step,
                loss: loss / count as f64,
                window_hist: std::mem::replace(&mut hist, vec![0; config.k]),
            };
            on_log(&block, state)?;
            logs.push(block);
            loss = 0.0;
            count = 0;
        }
    }
    Ok(logs)
}

/// `θ - φ` per named array.
///
/// Each entry is the float nearest `θ - φ` (within a few ulps) for which
/// `φ + ΔW` rounds back to `θ`, so [`apply_delta_w`] on the same base is
/// bit-exact wherever such a float exists.
pub fn extract_delta_w<T: Scalar>(theta: &MlpParams<T>, phi: &MlpParams<T>) -> Result<MlpParams<T>> {
    theta.zip_with(phi, exact_difference)
}

fn exact_difference<T: Scalar>(a: T, b: T) -> T {
    let d = a - b;
    if b + d == a || !d.is_finite() {
        return d;
    }
    let (mut up, mut down) = (d, d);
    for _ in 0..4 {
        up = up.next_up();
        if b + up == a {
            return up;
        }
        down = down.next_down();
        if b + down == a {
            return down;
        }
    }
    d
}

/// `base + ΔW` per named array.
pub fn apply_delta_w<T: Scalar>(base: &MlpParams<T>, delta: &MlpParams<T>) -> Result<MlpParams<T>> {
    base.zip_with(delta, |a, b| a + b)
}
