//! Few-step sampling with a distilled piecewise flow.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::eval::{TrajectoryRecord, VelocityField};
use crate::perflow::{CfgMode, FlowModel};
use crate::schedule::{NoiseSchedule, TargetMode, WindowParams, WindowPartition};
use crate::solver::{guided, Recorder};
use crate::{Label, Scalar};

/// Per-window step counts and guidance scales, noisiest window first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub steps_per_window: Vec<usize>,
    pub cfg_scales: Vec<f64>,
    pub target_mode: TargetMode,
}

impl SamplingPlan {
    pub fn k(&self) -> usize {
        self.steps_per_window.len()
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_window.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_window.is_empty() {
            return arg("a plan needs at least one window");
        }
        if self.cfg_scales.len() != self.steps_per_window.len() {
            return arg(format!(
                "plan has {} step counts but {} guidance scales",
                self.steps_per_window.len(),
                self.cfg_scales.len()
            ));
        }
        if self.steps_per_window.contains(&0) {
            return arg("every window needs at least one step");
        }
        if self.cfg_scales.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return arg("guidance scales must be finite and >= 0");
        }
        Ok(())
    }

    pub fn with_cfg_scales(mut self, scales: Vec<f64>) -> Result<Self> {
        self.cfg_scales = scales;
        self.validate()?;
        Ok(self)
    }
}

/// Default guidance schedule: a larger scale for the noisiest window, then
/// equal smaller scales.
pub fn default_cfg_scales(k: usize, cfg: Option<CfgMode>) -> Vec<f64> {
    let (first, rest) = match cfg {
        Some(CfgMode::Sync) => (7.5, 4.0),
        Some(CfgMode::Fixed) => (2.5, 1.5),
        None => (1.0, 1.0),
    };
    (0..k).map(|i| if i == 0 { first } else { rest }).collect()
}

/// One step per window plus `total_steps - k` extras handed out from the
/// noisiest window downward, wrapping around when extras exceed `k`.
pub fn make_plan(k: usize, total_steps: usize, cfg: Option<CfgMode>, mode: TargetMode) -> Result<SamplingPlan> {
    if k == 0 {
        return arg("a plan needs at least one window");
    }
    if total_steps < k {
        return arg(format!("{total_steps} steps cannot cover {k} windows"));
    }
    let mut steps = vec![1; k];
    for i in 0..total_steps - k {
        steps[i % k] += 1;
    }
    Ok(SamplingPlan {
        steps_per_window: steps,
        cfg_scales: default_cfg_scales(k, cfg),
        target_mode: mode,
    })
}

/// Parses `"a,b,c"` into guidance scales.
pub fn parse_cfg_schedule(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| crate::Error::Argument(format!("bad guidance scale {p:?}: {e}")))
        })
        .collect()
}

fn velocity_rows<T: Scalar>(
    model: &FlowModel<T>,
    wp: &WindowParams<T>,
    z: ArrayView2<T>,
    t: &[T],
    c: &[Label],
    w: T,
) -> Result<Array2<T>> {
    let scales = vec![w; z.nrows()];
    let mut pred = guided(|z, t, c| model.predict(z, t, c), z, t, c, &scales)?;
    if model.mode == TargetMode::Velocity {
        return Ok(pred);
    }
    let keep = T::one() - wp.lambda;
    for ((mut row, zr), &ti) in pred.rows_mut().into_iter().zip(z.rows()).zip(t) {
        let denom = wp.velocity_denominator(ti);
        if denom <= T::zero() {
            return Err(crate::Error::Numeric(format!(
                "velocity denominator {denom} is not positive"
            )));
        }
        row.zip_mut_with(&zr, |e, &zi| *e = (keep * zi - wp.eta * *e) / denom);
    }
    Ok(pred)
}

/// Integrates the student's piecewise flow from `t = 1` to `t = 0` with
/// uniform Euler steps inside each window.
pub fn sample<T: Scalar>(
    model: &FlowModel<T>,
    schedule: &NoiseSchedule<T>,
    partition: &WindowPartition<T>,
    plan: &SamplingPlan,
    z1: ArrayView2<T>,
    c: &[Label],
    record: bool,
) -> Result<(Array2<T>, Option<Vec<TrajectoryRecord>>)> {
    plan.validate()?;
    if plan.target_mode != model.mode {
        return arg(format!(
            "plan is for {} but the student predicts {}",
            plan.target_mode.as_str(),
            model.mode.as_str()
        ));
    }
    if plan.k() != partition.k() {
        return arg(format!(
            "plan has {} windows but the partition has {}",
            plan.k(),
            partition.k()
        ));
    }
    let n = z1.nrows();
    if c.len() != n {
        return arg("labels must match the batch size");
    }
    let params = WindowParams::for_partition(schedule, partition, model.mode)?;
    let mut z = z1.to_owned();
    let mut rec = record.then(|| Recorder::new(n));
    if let Some(r) = rec.as_mut() {
        r.push(partition.time(partition.k()), &z);
    }
    for (p, wp) in params.iter().rev().enumerate() {
        let steps = plan.steps_per_window[p];
        let w = T::of(plan.cfg_scales[p]);
        let width = wp.t_hi - wp.t_lo;
        let time = |j: usize| {
            if j == steps {
                wp.t_lo
            } else {
                wp.t_hi - T::of(j as f64) * width / T::of(steps as f64)
            }
        };
        for j in 0..steps {
            let (s, r) = (time(j), time(j + 1));
            let v = velocity_rows(model, wp, z.view(), &vec![s; n], c, w)?;
            let h = r - s;
            z.zip_mut_with(&v, |zi, &vi| *zi += h * vi);
            if let Some(rc) = rec.as_mut() {
                rc.push(r, &z);
            }
        }
    }
    let records = rec.map(|r| {
        let mut records = r.records;
        records.iter_mut().for_each(|t| t.mark_windows(partition));
        records
    });
    Ok((z, records))
}

/// The student's velocity field, window by window, for diagnostics.
pub struct PiecewiseFlow<'a, T> {
    pub model: &'a FlowModel<T>,
    pub partition: &'a WindowPartition<T>,
    params: Vec<WindowParams<T>>,
    /// Guidance scale per window, index `k - 1`.
    pub scales: Vec<T>,
}

impl<'a, T: Scalar> PiecewiseFlow<'a, T> {
    pub fn new(model: &'a FlowModel<T>, schedule: &NoiseSchedule<T>, partition: &'a WindowPartition<T>) -> Result<Self> {
        Ok(Self {
            params: WindowParams::for_partition(schedule, partition, model.mode)?,
            scales: vec![T::one(); partition.k()],
            model,
            partition,
        })
    }
}

impl<T: Scalar> VelocityField<T> for PiecewiseFlow<'_, T> {
    fn velocity(&self, z: ArrayView2<T>, t: &[T], c: &[Label]) -> Result<Array2<T>> {
        let n = z.nrows();
        if t.len() != n || c.len() != n {
            return arg("times and labels must match the batch size");
        }
        let mut out = Array2::zeros(z.raw_dim());
        let windows: Vec<usize> = t.iter().map(|&ti| self.partition.window_of(ti)).collect::<Result<_>>()?;
        for k in 1..=self.partition.k() {
            let rows: Vec<usize> = (0..n).filter(|&i| windows[i] == k).collect();
            if rows.is_empty() {
                continue;
            }
            let zs = z.select(ndarray::Axis(0), &rows);
            let ts: Vec<T> = rows.iter().map(|&i| t[i]).collect();
            let cs: Vec<Label> = rows.iter().map(|&i| c[i]).collect();
            let v = velocity_rows(self.model, &self.params[k - 1], zs.view(), &ts, &cs, self.scales[k - 1])?;
            for (j, &i) in rows.iter().enumerate() {
                out.row_mut(i).assign(&v.row(j));
            }
        }
        Ok(out)
    }
}
