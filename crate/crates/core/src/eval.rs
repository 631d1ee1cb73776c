//! Two-sample metrics, straightness diagnostics and trajectory export.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::rng::{normal, Rng};
use crate::schedule::{NoiseSchedule, Window, WindowPartition};
use crate::solver::solve_window_with_scales;
use crate::teacher::{GmmSpec, TeacherModel};
use crate::{Label, Scalar};

/// A vector field `v(z, t, c)` evaluated on a batch of rows.
pub trait VelocityField<T> {
    fn velocity(&self, z: ArrayView2<T>, t: &[T], c: &[Label]) -> Result<Array2<T>>;
}

/// One sampled path: visited times (decreasing), states, and the interior
/// window boundaries it crossed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub windows: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn validate(&self) -> Result<()> {
        if self.t.is_empty() || self.t.len() != self.z.len() {
            return Err(Error::Format(format!(
                "trajectory has {} times and {} states",
                self.t.len(),
                self.z.len()
            )));
        }
        if self.t.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Format("trajectory times must strictly decrease".into()));
        }
        let d = self.z[0].len();
        if self.z.iter().any(|s| s.len() != d) {
            return Err(Error::Format("trajectory states differ in dimension".into()));
        }
        Ok(())
    }

    /// State recorded at time `t`, if any.
    pub fn state_at(&self, t: f64) -> Option<&[f64]> {
        self.t
            .iter()
            .position(|&s| (s - t).abs() <= 1e-12)
            .map(|i| self.z[i].as_slice())
    }

    /// Fills `windows` with the interior boundaries of `partition` the path passes.
    pub fn mark_windows<T: Scalar>(&mut self, partition: &WindowPartition<T>) {
        let (Some(&first), Some(&last)) = (self.t.first(), self.t.last()) else {
            return;
        };
        self.windows = partition
            .interior()
            .iter()
            .map(|b| b.as_f64())
            .filter(|&b| b < first && b > last)
            .collect();
    }
}

pub fn export_trajectories(records: &[TrajectoryRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trajectories(records, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_trajectories(records: &[TrajectoryRecord], w: &mut impl Write) -> Result<()> {
    if records.is_empty() {
        return arg("no trajectories to export");
    }
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

fn check_sets<T>(x: &ArrayView2<T>, y: &ArrayView2<T>) -> Result<()> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return arg("sample sets must be nonempty");
    }
    if x.ncols() != y.ncols() {
        return arg(format!(
            "sample sets differ in dimension ({} vs {})",
            x.ncols(),
            y.ncols()
        ));
    }
    Ok(())
}

fn dist<T: Scalar>(a: ndarray::ArrayView1<T>, b: ndarray::ArrayView1<T>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&p, &q)| {
            let d = p.as_f64() - q.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn mean_self_distance<T: Scalar>(x: &ArrayView2<T>) -> f64 {
    let n = x.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in i + 1..n {
            row += dist(x.row(i), x.row(j));
        }
        total += row;
    }
    2.0 * total / (n * n) as f64
}

fn mean_cross_distance<T: Scalar>(x: &ArrayView2<T>, y: &ArrayView2<T>) -> f64 {
    let mut total = 0.0;
    for a in x.rows() {
        let mut row = 0.0;
        for b in y.rows() {
            row += dist(a, b);
        }
        total += row;
    }
    total / (x.nrows() * y.nrows()) as f64
}

fn canonical_order<T: Scalar>(x: &ArrayView2<T>, y: &ArrayView2<T>) -> Ordering {
    x.nrows().cmp(&y.nrows()).then_with(|| {
        x.iter()
            .zip(y.iter())
            .map(|(a, b)| a.as_f64().total_cmp(&b.as_f64()))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// `2 E‖x - y‖ - E‖x - x'‖ - E‖y - y'‖`, with all pairs (including `x = x'`) in the means.
///
/// Symmetric bit-for-bit in its arguments and zero on identical multisets.
pub fn energy_distance<T: Scalar>(x: ArrayView2<T>, y: ArrayView2<T>) -> Result<f64> {
    check_sets(&x, &y)?;
    let cross = match canonical_order(&x, &y) {
        Ordering::Equal if x.shape() == y.shape() => return Ok(0.0),
        Ordering::Greater => mean_cross_distance(&y, &x),
        _ => mean_cross_distance(&x, &y),
    };
    let within = mean_self_distance(&x) + mean_self_distance(&y);
    Ok((2.0 * cross - within).max(0.0))
}

fn sorted_projection<T: Scalar>(x: &ArrayView2<T>, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(dir).map(|(&v, &d)| v.as_f64() * d).sum())
        .collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Mean over `projections` random unit directions of the squared 1-D
/// Wasserstein-2 distance under the sorted coupling.
pub fn sliced_w2<T: Scalar>(
    x: ArrayView2<T>,
    y: ArrayView2<T>,
    projections: usize,
    rng: &mut Rng,
) -> Result<f64> {
    check_sets(&x, &y)?;
    if projections == 0 {
        return arg("sliced W2 needs at least one projection");
    }
    let d = x.ncols();
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = loop {
            let v: Vec<f64> = (0..d).map(|_| normal::<f64>(rng)).collect();
            if v.iter().any(|c| *c != 0.0) {
                break v;
            }
        };
        let norm = dir.iter().map(|c| c * c).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|c| *c /= norm);
        let px = sorted_projection(&x, &dir);
        let py = sorted_projection(&y, &dir);
        total += quantile_w2(&px, &py);
    }
    Ok(total / projections as f64)
}

/// Squared 1-D W2 between two sorted empirical samples, integrating the
/// quantile difference over the merged breakpoints.
fn quantile_w2(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    }
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev = 0.0;
    // Breakpoints (i+1)/n and (j+1)/m compared exactly as (i+1)*m vs (j+1)*n.
    while i < n && j < m {
        let (ei, ej) = ((i + 1) * m, (j + 1) * n);
        let next = ei.min(ej) as f64 / (n * m) as f64;
        let d = a[i] - b[j];
        total += (next - prev) * d * d;
        prev = next;
        if ei <= ej {
            i += 1;
        }
        if ej <= ei {
            j += 1;
        }
    }
    total
}

/// Per-window mean of `‖(z_{t_{k-1}} - z_{t_k}) / (t_{k-1} - t_k) - v(z_t, t)‖²`
/// over trajectories and `n_probe` probe times, with `z_t` on the window chord.
///
/// Probe times are the midpoints of `n_probe` equal slices of each window.
/// Every record must contain states at all partition boundaries. The result
/// is indexed `k - 1`.
pub fn straightness<T: Scalar>(
    field: &impl VelocityField<T>,
    partition: &WindowPartition<T>,
    records: &[TrajectoryRecord],
    labels: &[Label],
    n_probe: usize,
) -> Result<Vec<f64>> {
    if records.is_empty() {
        return arg("straightness needs at least one trajectory");
    }
    if labels.len() != records.len() {
        return arg("one label per trajectory is required");
    }
    if n_probe == 0 {
        return arg("straightness needs at least one probe time");
    }
    let d = records[0].z.first().map_or(0, |s| s.len());
    let mut out = Vec::with_capacity(partition.k());
    for k in 1..=partition.k() {
        let Window { t_hi, t_lo, .. } = partition.window(k)?;
        let (hi, lo) = (t_hi.as_f64(), t_lo.as_f64());
        let n = records.len() * n_probe;
        let mut z = Array2::<T>::zeros((n, d));
        let mut t = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        let mut chord = Vec::with_capacity(records.len());
        for (r, rec) in records.iter().enumerate() {
            let (Some(a), Some(b)) = (rec.state_at(hi), rec.state_at(lo)) else {
                return arg(format!("trajectory {r} lacks states at the boundaries of window {k}"));
            };
            if a.len() != d || b.len() != d {
                return arg(format!("trajectory {r} has states of the wrong dimension"));
            }
            chord.push(
                a.iter()
                    .zip(b)
                    .map(|(&p, &q)| (q - p) / (lo - hi))
                    .collect::<Vec<f64>>(),
            );
            for p in 0..n_probe {
                let frac = (p as f64 + 0.5) / n_probe as f64;
                let tp = lo + frac * (hi - lo);
                let mut row = z.row_mut(r * n_probe + p);
                for j in 0..d {
                    row[j] = T::of(frac * a[j] + (1.0 - frac) * b[j]);
                }
                t.push(T::of(tp));
                c.push(labels[r]);
            }
        }
        let v = field.velocity(z.view(), &t, &c)?;
        let mut total = 0.0;
        for (i, row) in v.rows().into_iter().enumerate() {
            let ch = &chord[i / n_probe];
            total += row
                .iter()
                .zip(ch)
                .map(|(&vi, &ci)| {
                    let e = ci - vi.as_f64();
                    e * e
                })
                .sum::<f64>();
        }
        out.push(total / n as f64);
    }
    Ok(out)
}

/// Mean L2 distance between `coarse`- and `reference`-substep teacher solves
/// of `window` from each start row.
pub fn endpoint_error<T: Scalar>(
    teacher: &TeacherModel<T>,
    schedule: &NoiseSchedule<T>,
    window: Window<T>,
    coarse: usize,
    reference: usize,
    starts: ArrayView2<T>,
    c: &[Label],
) -> Result<f64> {
    if coarse > reference {
        return arg(format!("coarse substeps {coarse} exceed reference {reference}"));
    }
    let n = starts.nrows();
    if n == 0 {
        return arg("endpoint error needs at least one start");
    }
    let hi = vec![window.t_hi; n];
    let lo = vec![window.t_lo; n];
    let solve = |steps| solve_window_with_scales(teacher, schedule, starts, &hi, &lo, c, steps, None);
    let a = solve(coarse)?;
    let b = solve(reference)?;
    let total: f64 = a.rows().into_iter().zip(b.rows()).map(|(p, q)| dist(p, q)).sum();
    Ok(total / n as f64)
}

/// Index of the nearest mode mean for each sample.
pub fn nearest_modes<T: Scalar>(samples: ArrayView2<T>, gmm: &GmmSpec<T>) -> Result<Vec<usize>> {
    if samples.ncols() != gmm.dim() {
        return arg(format!(
            "samples of dimension {} for a {}-dimensional mixture",
            samples.ncols(),
            gmm.dim()
        ));
    }
    Ok(samples
        .rows()
        .into_iter()
        .map(|row| {
            let d2 = |mu: &Vec<T>| -> f64 {
                row.iter()
                    .zip(mu)
                    .map(|(&x, &m)| (x - m).as_f64().powi(2))
                    .sum()
            };
            (0..gmm.n_modes())
                .min_by(|&a, &b| d2(&gmm.means[a]).total_cmp(&d2(&gmm.means[b])))
                .unwrap_or(0)
        })
        .collect())
}

/// Fraction of modes that receive at least `threshold` of their fair share
/// `n / modes` of the samples under nearest-mode assignment.
pub fn mode_coverage<T: Scalar>(samples: ArrayView2<T>, gmm: &GmmSpec<T>, threshold: f64) -> Result<f64> {
    if samples.nrows() == 0 {
        return arg("mode coverage needs samples");
    }
    let m = gmm.n_modes();
    let mut counts = vec![0usize; m];
    for i in nearest_modes(samples, gmm)? {
        counts[i] += 1;
    }
    let need = threshold * samples.nrows() as f64 / m as f64;
    Ok(counts.iter().filter(|&&c| c as f64 >= need).count() as f64 / m as f64)
}

/// Fraction of samples whose nearest mode carries the requested label.
pub fn class_purity<T: Scalar>(samples: ArrayView2<T>, labels: &[usize], gmm: &GmmSpec<T>) -> Result<f64> {
    let Some(mode_labels) = &gmm.labels else {
        return arg("class purity needs a labeled mixture");
    };
    if labels.len() != samples.nrows() || labels.is_empty() {
        return arg("one requested label per sample is required");
    }
    let hits = nearest_modes(samples, gmm)?
        .into_iter()
        .zip(labels)
        .filter(|(m, &c)| mode_labels[*m] == c)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.2;
pub const DEFAULT_PROJECTIONS: usize = 128;
pub const DEFAULT_PROBES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub energy_distance: f64,
    pub sliced_w2: f64,
    pub straightness_per_window: Vec<f64>,
    /// Only defined for mixture data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode_coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_purity: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        let all = [self.energy_distance, self.sliced_w2]
            .into_iter()
            .chain(self.mode_coverage)
            .chain(self.straightness_per_window.iter().copied())
            .chain(self.class_purity);
        if all.into_iter().all(ok) {
            Ok(())
        } else {
            Err(Error::Numeric("metric report holds a negative or non-finite value".into()))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
