//! DDIM solver for the teacher's probability-flow ODE.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::eval::{TrajectoryRecord, VelocityField};
use crate::schedule::NoiseSchedule;
use crate::teacher::TeacherModel;
use crate::{Label, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub substeps: usize,
    pub guidance_scale: f64,
    pub guidance_enabled: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            substeps: 8,
            guidance_scale: 1.0,
            guidance_enabled: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return arg("solver needs at least one substep");
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return arg(format!("guidance scale {} must be finite and >= 0", self.guidance_scale));
        }
        Ok(())
    }
}

/// Coefficients `(a, b)` of the DDIM update `z_r = a z + b ε̂` from `s` down to `r`.
pub fn ddim_coefficients<T: Scalar>(schedule: &NoiseSchedule<T>, s: T, r: T) -> Result<(T, T)> {
    if s < r {
        return arg(format!("DDIM step must go down in time, got s={s} < r={r}"));
    }
    let a_s = schedule.sqrt_alpha_bar(s)?;
    let a_r = schedule.sqrt_alpha_bar(r)?;
    if s == r {
        return Ok((T::one(), T::zero()));
    }
    if a_s <= T::zero() {
        return Err(Error::Singularity(format!("alpha_bar vanishes at s={s}")));
    }
    let ratio = a_r / a_s;
    Ok((ratio, schedule.sigma(r)? - ratio * schedule.sigma(s)?))
}

pub fn ddim_step<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    z: &[T],
    eps_hat: &[T],
    s: T,
    r: T,
) -> Result<Vec<T>> {
    if z.len() != eps_hat.len() {
        return arg(format!(
            "state and prediction differ in dimension ({} vs {})",
            z.len(),
            eps_hat.len()
        ));
    }
    let (a, b) = ddim_coefficients(schedule, s, r)?;
    Ok(z.iter().zip(eps_hat).map(|(&zi, &ei)| a * zi + b * ei).collect())
}

/// `ε_null + w (ε_c - ε_null)` per row, from any predictor.
///
/// Rows with `w == 1` return the conditional prediction untouched and never
/// query the null branch.
pub fn guided<T, F>(predict: F, z: ArrayView2<T>, t: &[T], c: &[Label], w: &[T]) -> Result<Array2<T>>
where
    T: Scalar,
    F: Fn(ArrayView2<T>, &[T], &[Label]) -> Result<Array2<T>>,
{
    let n = z.nrows();
    if t.len() != n || c.len() != n || w.len() != n {
        return arg("times, labels and scales must match the batch size");
    }
    let guided_rows: Vec<usize> = (0..n).filter(|&i| w[i] != T::one()).collect();
    if let Some(&i) = guided_rows.iter().find(|&&i| c[i].is_none()) {
        return arg(format!("row {i} has a null label but guidance scale {}", w[i]));
    }
    let mut out = predict(z, t, c)?;
    if guided_rows.is_empty() {
        return Ok(out);
    }
    let zs = z.select(Axis(0), &guided_rows);
    let ts: Vec<T> = guided_rows.iter().map(|&i| t[i]).collect();
    let nulls = vec![None; guided_rows.len()];
    let uncond = predict(zs.view(), &ts, &nulls)?;
    for (j, &i) in guided_rows.iter().enumerate() {
        let wi = w[i];
        out.row_mut(i)
            .zip_mut_with(&uncond.row(j), |e, &u| *e = u + wi * (*e - u));
    }
    Ok(out)
}

/// Guided ε-prediction of the teacher with one scale for the whole batch.
pub fn guided_eps<T: Scalar>(
    teacher: &TeacherModel<T>,
    schedule: &NoiseSchedule<T>,
    z: ArrayView2<T>,
    t: &[T],
    c: &[Label],
    w: T,
) -> Result<Array2<T>> {
    guided_eps_rows(teacher, schedule, z, t, c, &vec![w; z.nrows()])
}

pub fn guided_eps_rows<T: Scalar>(
    teacher: &TeacherModel<T>,
    schedule: &NoiseSchedule<T>,
    z: ArrayView2<T>,
    t: &[T],
    c: &[Label],
    w: &[T],
) -> Result<Array2<T>> {
    guided(|z, t, c| teacher.eps(schedule, z, t, c), z, t, c, w)
}

fn check_rows<T>(z: &ArrayView2<T>, t_hi: &[T], t_lo: &[T], c: &[Label]) -> Result<()> {
    let n = z.nrows();
    if t_hi.len() != n || t_lo.len() != n || c.len() != n {
        return arg("window times and labels must match the batch size");
    }
    Ok(())
}

/// Solves every row from `t_hi[i]` down to `t_lo[i]` in `substeps` uniform DDIM steps.
///
/// `scales` selects guided predictions; `None` queries the raw teacher.
pub fn solve_window_with_scales<T: Scalar>(
    teacher: &TeacherModel<T>,
    schedule: &NoiseSchedule<T>,
    z: ArrayView2<T>,
    t_hi: &[T],
    t_lo: &[T],
    c: &[Label],
    substeps: usize,
    scales: Option<&[T]>,
) -> Result<Array2<T>> {
    check_rows(&z, t_hi, t_lo, c)?;
    if substeps == 0 {
        return arg("solver needs at least one substep");
    }
    let n = z.nrows();
    let steps = T::of(substeps as f64);
    let grid = |i: usize, j: usize| -> T {
        if j == substeps {
            t_lo[i]
        } else {
            t_hi[i] - T::of(j as f64) * (t_hi[i] - t_lo[i]) / steps
        }
    };
    let mut state = z.to_owned();
    let mut s = vec![T::zero(); n];
    for j in 0..substeps {
        for (i, si) in s.iter_mut().enumerate() {
            *si = grid(i, j);
        }
        let eps = match scales {
            Some(w) => guided_eps_rows(teacher, schedule, state.view(), &s, c, w)?,
            None => teacher.eps(schedule, state.view(), &s, c)?,
        };
        for (i, (mut row, e)) in state.rows_mut().into_iter().zip(eps.rows()).enumerate() {
            let (a, b) = ddim_coefficients(schedule, s[i], grid(i, j + 1))?;
            row.zip_mut_with(&e, |zi, &ei| *zi = a * *zi + b * ei);
        }
    }
    Ok(state)
}

/// Window solve under a [`SolverConfig`].
pub fn solve_window<T: Scalar>(
    teacher: &TeacherModel<T>,
    schedule: &NoiseSchedule<T>,
    z: ArrayView2<T>,
    t_hi: &[T],
    t_lo: &[T],
    c: &[Label],
    config: &SolverConfig,
) -> Result<Array2<T>> {
    config.validate()?;
    let scales = config
        .guidance_enabled
        .then(|| vec![T::of(config.guidance_scale); z.nrows()]);
    solve_window_with_scales(teacher, schedule, z, t_hi, t_lo, c, config.substeps, scales.as_deref())
}

pub(crate) struct Recorder {
    pub records: Vec<TrajectoryRecord>,
}

impl Recorder {
    pub fn new(n: usize) -> Self {
        Self {
            records: vec![TrajectoryRecord::default(); n],
        }
    }

    pub fn push<T: Scalar>(&mut self, t: T, z: &Array2<T>) {
        for (rec, row) in self.records.iter_mut().zip(z.rows()) {
            rec.t.push(t.as_f64());
            rec.z.push(row.iter().map(|v| v.as_f64()).collect());
        }
    }
}

/// Many-step DDIM sampling from `t = 1` to `t = 0` on the grid `t_j = (n - j) / n`.
pub fn sample_full<T: Scalar>(
    teacher: &TeacherModel<T>,
    schedule: &NoiseSchedule<T>,
    n_steps: usize,
    z1: ArrayView2<T>,
    c: &[Label],
    w: T,
    record: bool,
) -> Result<(Array2<T>, Option<Vec<TrajectoryRecord>>)> {
    if n_steps == 0 {
        return arg("sampling needs at least one step");
    }
    let n = z1.nrows();
    if c.len() != n {
        return arg("labels must match the batch size");
    }
    let steps = T::of(n_steps as f64);
    let time = |j: usize| T::of((n_steps - j) as f64) / steps;
    let scales = vec![w; n];
    let mut state = z1.to_owned();
    let mut rec = record.then(|| Recorder::new(n));
    if let Some(r) = rec.as_mut() {
        r.push(T::one(), &state);
    }
    for j in 0..n_steps {
        let (s, r) = (time(j), time(j + 1));
        let eps = guided_eps_rows(teacher, schedule, state.view(), &vec![s; n], c, &scales)?;
        let (a, b) = ddim_coefficients(schedule, s, r)?;
        state.zip_mut_with(&eps, |zi, &ei| *zi = a * *zi + b * ei);
        if let Some(rc) = rec.as_mut() {
            rc.push(r, &state);
        }
    }
    Ok((state, rec.map(|r| r.records)))
}

/// The teacher's probability-flow velocity `c_z z + c_ε ε̂`, optionally guided.
pub struct ProbabilityFlow<'a, T> {
    pub teacher: &'a TeacherModel<T>,
    pub schedule: &'a NoiseSchedule<T>,
    pub guidance: T,
}

impl<'a, T: Scalar> ProbabilityFlow<'a, T> {
    pub fn new(teacher: &'a TeacherModel<T>, schedule: &'a NoiseSchedule<T>) -> Self {
        Self {
            teacher,
            schedule,
            guidance: T::one(),
        }
    }
}

impl<T: Scalar> VelocityField<T> for ProbabilityFlow<'_, T> {
    fn velocity(&self, z: ArrayView2<T>, t: &[T], c: &[Label]) -> Result<Array2<T>> {
        let w = vec![self.guidance; z.nrows()];
        let mut v = guided_eps_rows(self.teacher, self.schedule, z, t, c, &w)?;
        for ((mut row, zr), &ti) in v.rows_mut().into_iter().zip(z.rows()).zip(t) {
            let (cz, ce) = self.schedule.ode_coefficients(ti)?;
            row.zip_mut_with(&zr, |e, &zi| *e = cz * zi + ce * *e);
        }
        Ok(v)
    }
}
