//! Synthetic datasets and their JSON Lines persistence.
//!
//! One record per line: `{"x": [floats], "label": int or null}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::rng::{self, Rng};
use crate::teacher::GmmSpec;
use crate::{Label, Scalar};

/// Samples (one row each) with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub x: Array2<T>,
    pub labels: Vec<Label>,
}

#[derive(Serialize, Deserialize)]
struct Record<T> {
    x: Vec<T>,
    label: Label,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(x: Array2<T>, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != x.nrows() {
            return arg(format!("{} labels for {} samples", labels.len(), x.nrows()));
        }
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |m| m + 1)
    }

    /// `n` rows drawn uniformly with replacement.
    pub fn minibatch(&self, n: usize, rng: &mut Rng) -> Result<(Array2<T>, Vec<Label>)> {
        if self.is_empty() {
            return arg("cannot draw from an empty dataset");
        }
        let idx: Vec<usize> = (0..n).map(|_| rng::index(self.len(), rng)).collect();
        let x = self.x.select(ndarray::Axis(0), &idx);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((x, labels))
    }

    /// Rows carrying label `c`.
    pub fn with_label(&self, c: usize) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == Some(c)).collect();
        Self {
            x: self.x.select(ndarray::Axis(0), &idx),
            labels: vec![Some(c); idx.len()],
        }
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for (row, &label) in self.x.rows().into_iter().zip(&self.labels) {
            let rec = Record {
                x: row.to_vec(),
                label,
            };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut dim = None;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record<T> = serde_json::from_str(&line)?;
            match dim {
                None => dim = Some(rec.x.len()),
                Some(d) if d != rec.x.len() => {
                    return arg(format!(
                        "line {}: dimension {} differs from {d}",
                        lineno + 1,
                        rec.x.len()
                    ))
                }
                _ => {}
            }
            data.extend(rec.x);
            labels.push(rec.label);
        }
        let d = dim.unwrap_or(0);
        let x = Array2::from_shape_vec((labels.len(), d), data)
            .map_err(|e| Error::Argument(e.to_string()))?;
        Self::new(x, labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetKind<T> {
    Gmm {
        gmm: GmmSpec<T>,
    },
    /// Two interleaved half circles, centered and scaled; label = moon index.
    TwoMoons {
        noise: T,
        scale: T,
    },
    /// Uniform over the dark cells of a `cells × cells` board of side `size`
    /// centered at the origin; label = row parity.
    Checkerboard {
        cells: usize,
        size: T,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec<T> {
    #[serde(flatten)]
    pub kind: DatasetKind<T>,
    pub n: usize,
    pub seed: u64,
    /// Attach class labels (mode labels for mixtures).
    #[serde(default)]
    pub labeled: bool,
}

impl<T: Scalar> DatasetSpec<T> {
    /// Eight equal modes on a circle of radius 4, variance 0.05.
    pub fn circle_gmm(n: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::Gmm {
                gmm: GmmSpec::circle(8, T::of(4.0), T::of(0.05), None)
                    .expect("preset mixture is valid"),
            },
            n,
            seed,
            labeled: false,
        }
    }

    /// The circle mixture with alternating modes in two classes.
    pub fn two_class_gmm(n: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::Gmm {
                gmm: GmmSpec::circle(8, T::of(4.0), T::of(0.05), Some(2))
                    .expect("preset mixture is valid"),
            },
            n,
            seed,
            labeled: true,
        }
    }

    pub fn two_moons(n: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::TwoMoons {
                noise: T::of(0.05),
                scale: T::of(2.0),
            },
            n,
            seed,
            labeled: false,
        }
    }

    pub fn checkerboard(n: usize, seed: u64) -> Self {
        Self {
            kind: DatasetKind::Checkerboard {
                cells: 4,
                size: T::of(4.0),
            },
            n,
            seed,
            labeled: false,
        }
    }

    pub fn gmm(&self) -> Option<&GmmSpec<T>> {
        match &self.kind {
            DatasetKind::Gmm { gmm } => Some(gmm),
            _ => None,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            DatasetKind::Gmm { gmm } => gmm.dim(),
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("dataset size must be at least 1".into()));
        }
        match &self.kind {
            DatasetKind::Gmm { gmm } => {
                gmm.validate()?;
                if self.labeled && gmm.labels.is_none() {
                    return Err(Error::Config("labeled mixture dataset needs mode labels".into()));
                }
            }
            DatasetKind::TwoMoons { noise, scale } => {
                if !(*noise >= T::zero()) || !(*scale > T::zero()) {
                    return Err(Error::Config("two-moons needs noise >= 0 and scale > 0".into()));
                }
            }
            DatasetKind::Checkerboard { cells, size } => {
                if *cells < 2 || !(*size > T::zero()) {
                    return Err(Error::Config("checkerboard needs >= 2 cells and size > 0".into()));
                }
            }
        }
        Ok(())
    }

    /// The mixture spec translated by `offset`; other kinds are rejected.
    pub fn shift(&self, offset: &[T]) -> Result<Self> {
        match &self.kind {
            DatasetKind::Gmm { gmm } => Ok(Self {
                kind: DatasetKind::Gmm {
                    gmm: gmm.translated(offset)?,
                },
                ..self.clone()
            }),
            _ => arg("only mixture datasets can be shifted"),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..self.clone() }
    }
}

/// Draws the dataset described by `spec`. Deterministic in `spec.seed`.
pub fn generate<T: Scalar>(spec: &DatasetSpec<T>) -> Result<Dataset<T>> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let n = spec.n;
    let (x, labels) = match &spec.kind {
        DatasetKind::Gmm { gmm } => {
            let (x, modes) = gmm.sample(n, &mut rng);
            let labels = match (&gmm.labels, spec.labeled) {
                (Some(l), true) => modes.iter().map(|&m| Some(l[m])).collect(),
                _ => vec![None; n],
            };
            (x, labels)
        }
        DatasetKind::TwoMoons { noise, scale } => {
            let mut x = Array2::zeros((n, 2));
            let mut labels = Vec::with_capacity(n);
            for mut row in x.rows_mut() {
                let inner = rng::uniform::<f64>(&mut rng) < 0.5;
                let theta = T::of(std::f64::consts::PI) * rng::uniform::<T>(&mut rng);
                let (px, py) = if inner {
                    (T::one() - theta.cos(), T::of(0.5) - theta.sin())
                } else {
                    (theta.cos(), theta.sin())
                };
                let nx: T = rng::normal(&mut rng);
                let ny: T = rng::normal(&mut rng);
                row[0] = *scale * (px + *noise * nx - T::of(0.5));
                row[1] = *scale * (py + *noise * ny - T::of(0.25));
                labels.push(spec.labeled.then_some(inner as usize));
            }
            (x, labels)
        }
        DatasetKind::Checkerboard { cells, size } => {
            let dark: Vec<(usize, usize)> = (0..*cells)
                .flat_map(|i| (0..*cells).map(move |j| (i, j)))
                .filter(|(i, j)| (i + j) % 2 == 0)
                .collect();
            let cell = *size / T::of(*cells as f64);
            let half = *size * T::of(0.5);
            let mut x = Array2::zeros((n, 2));
            let mut labels = Vec::with_capacity(n);
            for mut row in x.rows_mut() {
                let (i, j) = dark[rng::index(dark.len(), &mut rng)];
                let u: T = rng::uniform(&mut rng);
                let v: T = rng::uniform(&mut rng);
                row[0] = (T::of(j as f64) + u) * cell - half;
                row[1] = (T::of(i as f64) + v) * cell - half;
                labels.push(spec.labeled.then_some(i % 2));
            }
            (x, labels)
        }
    };
    Dataset::new(x, labels)
}
