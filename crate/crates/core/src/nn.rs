//! A small dense network with time and label conditioning, exact
//! reverse-mode gradients and an Adam optimizer.
//!
//! Layout: `L = hidden.len()` hidden layers followed by a linear output
//! layer of width `in_dim`. The first layer's pre-activation receives three
//! additive terms: the state projection, a projection of sinusoidal time
//! features, and a learned row of the label embedding. Label `num_classes`
//! is the reserved null label used for unconditional predictions.
//!
//! Parameter names: `layer{i}.weight` `(out, in)`, `layer{i}.bias` `(out)`
//! for `i ∈ 0..=L` (layer `L` is the output), `time.weight`
//! `(width_0, time_embed_dim)` and `label.embed` `(num_classes + 1, width_0)`.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::rng::{self, Rng};
use crate::{Label, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let th = x.tanh();
                T::one() - th * th
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    /// Number of real condition labels; the null label is extra.
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            in_dim: 2,
            hidden: vec![256, 256, 256],
            time_embed_dim: 64,
            num_classes: 0,
            activation: Activation::Silu,
        }
    }
}

/// Highest angular frequency of the time features.
const MAX_TIME_FREQUENCY: f64 = 200.0;

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 {
            return Err(Error::Config("in_dim must be at least 1".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be at least 1".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    pub fn null_label(&self) -> usize {
        self.num_classes
    }

    /// Width of layer `i`'s output.
    fn width(&self, i: usize) -> usize {
        if i < self.hidden.len() {
            self.hidden[i]
        } else {
            self.in_dim
        }
    }

    fn fan_in(&self, i: usize) -> usize {
        if i == 0 {
            self.in_dim
        } else {
            self.hidden[i - 1]
        }
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Every parameter name with its shape.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for i in 0..self.n_layers() {
            out.push((weight_name(i), vec![self.width(i), self.fan_in(i)]));
            out.push((bias_name(i), vec![self.width(i)]));
        }
        out.push((TIME_WEIGHT.into(), vec![self.width(0), self.time_embed_dim]));
        out.push((LABEL_EMBED.into(), vec![self.num_classes + 1, self.width(0)]));
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Sinusoidal features of `t`, one row per entry.
    pub fn time_features<T: Scalar>(&self, t: &[T]) -> Array2<T> {
        let half = self.time_embed_dim / 2;
        let freqs: Vec<T> = (0..half)
            .map(|j| {
                let frac = if half > 1 {
                    j as f64 / (half - 1) as f64
                } else {
                    0.0
                };
                T::of(MAX_TIME_FREQUENCY.powf(frac))
            })
            .collect();
        let mut out = Array2::zeros((t.len(), self.time_embed_dim));
        for (mut row, &ti) in out.rows_mut().into_iter().zip(t) {
            for (j, &w) in freqs.iter().enumerate() {
                let (s, c) = (ti * w).sin_cos();
                row[j] = s;
                row[half + j] = c;
            }
        }
        out
    }

    fn label_index(&self, c: Label) -> Result<usize> {
        match c {
            None => Ok(self.null_label()),
            Some(l) if l < self.num_classes => Ok(l),
            Some(l) => arg(format!(
                "label {l} outside 0..{} for this network",
                self.num_classes
            )),
        }
    }
}

pub const TIME_WEIGHT: &str = "time.weight";
pub const LABEL_EMBED: &str = "label.embed";

pub fn weight_name(i: usize) -> String {
    format!("layer{i}.weight")
}

pub fn bias_name(i: usize) -> String {
    format!("layer{i}.bias")
}

/// Named parameter arrays. Also used for gradients, Adam moments and ΔW.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    tensors: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn from_tensors(tensors: BTreeMap<String, ArrayD<T>>) -> Self {
        Self { tensors }
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let tensors = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| (name, ArrayD::zeros(IxDyn(&shape))))
            .collect();
        Self { tensors }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, small normal label rows.
    pub fn init(spec: &MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in spec.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".bias") {
                vec![T::zero(); n]
            } else if name == LABEL_EMBED {
                (0..n).map(|_| T::of(0.1) * rng::normal::<T>(rng)).collect()
            } else {
                let bound = 1.0 / (shape[1] as f64).sqrt();
                (0..n)
                    .map(|_| T::of(bound * (2.0 * rng::uniform::<f64>(rng) - 1.0)))
                    .collect()
            };
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Argument(e.to_string()))?;
            tensors.insert(name, arr);
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|a| a.iter().all(|x| x.is_finite()))
    }

    /// Checks names and shapes against `spec`.
    pub fn check_spec(&self, spec: &MlpSpec) -> Result<()> {
        let expected = spec.param_shapes();
        if expected.len() != self.tensors.len() {
            return arg(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                self.tensors.len()
            ));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                Some(a) => {
                    return arg(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        a.shape()
                    ))
                }
                None => return arg(format!("missing parameter {name}")),
            }
        }
        Ok(())
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return arg(format!(
                "parameter sets differ in size ({} vs {})",
                self.tensors.len(),
                other.tensors.len()
            ));
        }
        for (name, a) in &self.tensors {
            match other.tensors.get(name) {
                Some(b) if a.shape() == b.shape() => {}
                Some(b) => {
                    return arg(format!(
                        "parameter {name} shape mismatch: {:?} vs {:?}",
                        a.shape(),
                        b.shape()
                    ))
                }
                None => return arg(format!("parameter {name} missing from second set")),
            }
        }
        Ok(())
    }

    /// Elementwise combination of two compatible sets.
    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_compatible(other)?;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, a)| {
                let b = &other.tensors[name];
                let mut out = a.clone();
                out.zip_mut_with(b, |x, &y| *x = f(*x, y));
                (name.clone(), out)
            })
            .collect();
        Ok(Self { tensors })
    }

    /// Converts element type (used by checkpoint I/O).
    pub fn cast<U: Scalar>(&self) -> MlpParams<U> {
        MlpParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, a)| (k.clone(), a.mapv(|x| U::of(x.as_f64()))))
                .collect(),
        }
    }

    fn matrix(&self, name: &str) -> ArrayView2<'_, T> {
        self.tensors[name]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("parameter shapes are validated before use")
    }

    fn vector(&self, name: &str) -> ndarray::ArrayView1<'_, T> {
        self.tensors[name]
            .view()
            .into_dimensionality()
            .expect("parameter shapes are validated before use")
    }
}

/// Intermediate activations kept for the backward pass.
struct Trace<T> {
    label_rows: Vec<usize>,
    time: Array2<T>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<T>>,
    /// Post-activations of the hidden layers.
    post: Vec<Array2<T>>,
    output: Array2<T>,
}

fn check_inputs<T: Scalar>(spec: &MlpSpec, z: &ArrayView2<T>, t: &[T], c: &[Label]) -> Result<()> {
    if z.ncols() != spec.in_dim {
        return arg(format!(
            "state dimension {} does not match network input {}",
            z.ncols(),
            spec.in_dim
        ));
    }
    if t.len() != z.nrows() || c.len() != z.nrows() {
        return arg(format!(
            "batch of {} states has {} times and {} labels",
            z.nrows(),
            t.len(),
            c.len()
        ));
    }
    if let Some(bad) = t.iter().find(|x| !(**x >= T::zero() && **x <= T::one())) {
        return arg(format!("time {bad} outside [0, 1]"));
    }
    Ok(())
}

fn run<T: Scalar>(
    params: &MlpParams<T>,
    spec: &MlpSpec,
    z: ArrayView2<T>,
    t: &[T],
    c: &[Label],
    keep: bool,
) -> Result<Trace<T>> {
    check_inputs(spec, &z, t, c)?;
    let label_rows = c
        .iter()
        .map(|&l| spec.label_index(l))
        .collect::<Result<Vec<_>>>()?;
    let time = spec.time_features(t);
    let embed = params.matrix(LABEL_EMBED);

    let mut a = z.dot(&params.matrix(&weight_name(0)).t());
    a += &params.vector(&bias_name(0));
    a += &time.dot(&params.matrix(TIME_WEIGHT).t());
    for (mut row, &l) in a.rows_mut().into_iter().zip(&label_rows) {
        row += &embed.row(l);
    }

    let mut pre = Vec::new();
    let mut post = Vec::new();
    for i in 1..spec.n_layers() {
        let h = a.mapv(|x| spec.activation.apply(x));
        let mut next = h.dot(&params.matrix(&weight_name(i)).t());
        next += &params.vector(&bias_name(i));
        if keep {
            pre.push(a);
            post.push(h);
        }
        a = next;
    }
    Ok(Trace {
        label_rows,
        time,
        pre,
        post,
        output: a,
    })
}

/// Predictions for a batch of states `z` (one row each) at times `t` with labels `c`.
pub fn forward<T: Scalar>(
    params: &MlpParams<T>,
    spec: &MlpSpec,
    z: ArrayView2<T>,
    t: &[T],
    c: &[Label],
) -> Result<Array2<T>> {
    Ok(run(params, spec, z, t, c, false)?.output)
}

/// One regression batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub z: Array2<T>,
    pub t: Vec<T>,
    pub c: Vec<Label>,
    pub target: Array2<T>,
}

/// Mean over the batch of the squared L2 error, and its exact gradient.
pub fn loss_and_grad<T: Scalar>(
    params: &MlpParams<T>,
    spec: &MlpSpec,
    batch: &Batch<T>,
) -> Result<(T, MlpParams<T>)> {
    let n = batch.z.nrows();
    if n == 0 {
        return arg("empty batch");
    }
    if batch.target.dim() != batch.z.dim() {
        return arg(format!(
            "target shape {:?} does not match prediction shape {:?}",
            batch.target.dim(),
            batch.z.dim()
        ));
    }
    let trace = run(params, spec, batch.z.view(), &batch.t, &batch.c, true)?;
    let resid = &trace.output - &batch.target;
    let loss = resid
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&x| x * x).sum::<T>())
        .sum::<T>()
        / T::of(n as f64);
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("loss is {loss}")));
    }

    let mut grads = MlpParams::zeros(spec);
    let mut delta = resid * T::of(2.0 / n as f64);
    for i in (0..spec.n_layers()).rev() {
        let input = if i == 0 {
            batch.z.view()
        } else {
            trace.post[i - 1].view()
        };
        set(&mut grads, &weight_name(i), delta.t().dot(&input).into_dyn());
        set(&mut grads, &bias_name(i), delta.sum_axis(Axis(0)).into_dyn());
        if i == 0 {
            set(&mut grads, TIME_WEIGHT, delta.t().dot(&trace.time).into_dyn());
            let mut embed = Array2::<T>::zeros((spec.num_classes + 1, spec.width(0)));
            for (row, &l) in delta.rows().into_iter().zip(&trace.label_rows) {
                let mut dst = embed.row_mut(l);
                dst += &row;
            }
            set(&mut grads, LABEL_EMBED, embed.into_dyn());
        } else {
            let mut back = delta.dot(&params.matrix(&weight_name(i)));
            back.zip_mut_with(&trace.pre[i - 1], |g, &x| {
                *g *= spec.activation.derivative(x)
            });
            delta = back;
        }
    }
    Ok((loss, grads))
}

fn set<T: Scalar>(params: &mut MlpParams<T>, name: &str, value: ArrayD<T>) {
    *params.get_mut(name).expect("gradient names follow the spec") = value;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cosine-anneal the step size over this many updates, then hold it.
    pub decay_steps: Option<u64>,
    /// Step size at the end of the decay, as a fraction of `lr`.
    pub final_lr_ratio: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_steps: None,
            final_lr_ratio: 0.02,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn with_cosine_decay(self, steps: u64) -> Self {
        Self {
            decay_steps: Some(steps),
            ..self
        }
    }

    /// Step size of update number `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.decay_steps {
            Some(d) if d > 0 => {
                let x = step.min(d) as f64 / d as f64;
                let r = self.final_lr_ratio;
                self.lr * (r + (1.0 - r) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos()))
            }
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.final_lr_ratio);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: MlpParams<T>,
    pub v: MlpParams<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &MlpParams<T>) -> Self {
        let zeros = params
            .zip_with(params, |_, _| T::zero())
            .expect("a set is compatible with itself");
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Scalar>(
    params: &mut MlpParams<T>,
    grads: &MlpParams<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.m)?;
    let cfg = state.config;
    let lr = T::of(cfg.lr_at(state.step));
    state.step += 1;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(state.step as i32));
    let c2 = T::one() - T::of(cfg.beta2.powi(state.step as i32));
    let eps = T::of(cfg.eps);
    for (name, p) in params.iter_mut() {
        let g = &grads.tensors[name];
        let m = state.m.tensors.get_mut(name).unwrap();
        let v = state.v.tensors.get_mut(name).unwrap();
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}

/// Single-row convenience wrapper around [`forward`].
pub fn forward_one<T: Scalar>(
    params: &MlpParams<T>,
    spec: &MlpSpec,
    z: &[T],
    t: T,
    c: Label,
) -> Result<Vec<T>> {
    let zv = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::Argument(e.to_string()))?;
    Ok(forward(params, spec, zv, &[t], &[c])?.into_raw_vec_and_offset().0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny_linear() -> MlpSpec {
        MlpSpec {
            in_dim: 1,
            hidden: vec![],
            time_embed_dim: 2,
            num_classes: 0,
            activation: Activation::Silu,
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let spec = MlpSpec {
            hidden: vec![8, 8],
            num_classes: 2,
            ..MlpSpec::default()
        };
        let p = MlpParams::<f64>::zeros(&spec);
        let z = Array2::from_elem((3, 2), 1.7);
        let out = forward(&p, &spec, z.view(), &[0.1, 0.5, 1.0], &[Some(0), None, Some(1)]).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = MlpSpec {
            hidden: vec![16, 16],
            num_classes: 3,
            ..MlpSpec::default()
        };
        let p = MlpParams::<f64>::init(&spec, &mut seeded(1)).unwrap();
        let z = crate::rng::normal_matrix::<f64>(5, 2, &mut seeded(2));
        let t = [0.0, 0.2, 0.4, 0.6, 1.0];
        let c = [None, Some(0), Some(1), Some(2), None];
        let a = forward(&p, &spec, z.view(), &t, &c).unwrap();
        let b = forward(&p, &spec, z.view(), &t, &c).unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn identity_configuration_returns_input() {
        let spec = MlpSpec {
            in_dim: 3,
            hidden: vec![],
            time_embed_dim: 4,
            num_classes: 1,
            activation: Activation::Tanh,
        };
        let mut p = MlpParams::<f64>::zeros(&spec);
        let w = p.get_mut("layer0.weight").unwrap();
        for i in 0..3 {
            w[[i, i]] = 1.0;
        }
        let z = [0.3, -4.0, 12.5];
        assert_eq!(forward_one(&p, &spec, &z, 0.3, Some(0)).unwrap(), z.to_vec());
    }

    #[test]
    fn single_weight_hand_gradient() {
        let spec = tiny_linear();
        let mut p = MlpParams::<f64>::zeros(&spec);
        p.get_mut("layer0.weight").unwrap()[[0, 0]] = 1.0;
        let batch = Batch {
            z: Array2::from_elem((1, 1), 2.0),
            t: vec![0.5],
            c: vec![None],
            target: Array2::zeros((1, 1)),
        };
        let (loss, g) = loss_and_grad(&p, &spec, &batch).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(g.get("layer0.weight").unwrap()[[0, 0]], 8.0);
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let spec = MlpSpec {
            hidden: vec![6],
            num_classes: 2,
            ..MlpSpec::default()
        };
        let p = MlpParams::<f64>::init(&spec, &mut seeded(4)).unwrap();
        let z = crate::rng::normal_matrix::<f64>(4, 2, &mut seeded(5));
        let t = vec![0.1, 0.3, 0.7, 0.9];
        let c = vec![Some(1), None, Some(0), Some(1)];
        let target = forward(&p, &spec, z.view(), &t, &c).unwrap();
        let (loss, g) = loss_and_grad(&p, &spec, &Batch { z, t, c, target }).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|(_, a)| a.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = MlpSpec {
            hidden: vec![4],
            num_classes: 2,
            ..MlpSpec::default()
        };
        let p = MlpParams::<f64>::zeros(&spec);
        let z = Array2::<f64>::zeros((1, 3));
        assert!(matches!(forward(&p, &spec, z.view(), &[0.5], &[None]), Err(Error::Argument(_))));
        let z = Array2::<f64>::zeros((1, 2));
        assert!(matches!(forward(&p, &spec, z.view(), &[0.5], &[Some(2)]), Err(Error::Argument(_))));
        assert!(matches!(forward(&p, &spec, z.view(), &[1.5], &[None]), Err(Error::Argument(_))));
        let empty = Batch {
            z: Array2::<f64>::zeros((0, 2)),
            t: vec![],
            c: vec![],
            target: Array2::zeros((0, 2)),
        };
        assert!(loss_and_grad(&p, &spec, &empty).is_err());
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let spec = tiny_linear();
        let mut p = MlpParams::<f64>::zeros(&spec);
        p.get_mut("layer0.weight").unwrap()[[0, 0]] = f64::INFINITY;
        let batch = Batch {
            z: Array2::from_elem((1, 1), 1.0),
            t: vec![0.5],
            c: vec![None],
            target: Array2::zeros((1, 1)),
        };
        assert!(matches!(loss_and_grad(&p, &spec, &batch), Err(Error::Divergence(_))));
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let spec = MlpSpec {
            hidden: vec![5],
            ..MlpSpec::default()
        };
        let mut p = MlpParams::<f64>::init(&spec, &mut seeded(7)).unwrap();
        let before = p.clone();
        let g = MlpParams::zeros(&spec);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let spec = tiny_linear();
        let mut p = MlpParams::<f64>::zeros(&spec);
        let mut g = MlpParams::zeros(&spec);
        g.get_mut("layer0.weight").unwrap()[[0, 0]] = 3.0;
        g.get_mut("layer0.bias").unwrap()[0] = -0.02;
        let mut st = AdamState::new(AdamConfig::with_lr(1e-3), &p);
        adam_step(&mut p, &g, &mut st).unwrap();
        // m̂ = g and v̂ = g², so the step is lr * g / (|g| + eps).
        let w = p.get("layer0.weight").unwrap()[[0, 0]];
        let b = p.get("layer0.bias").unwrap()[0];
        assert!((w + 1e-3 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((b - 1e-3 * 0.02 / (0.02 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let a = MlpSpec {
            hidden: vec![5],
            ..MlpSpec::default()
        };
        let b = MlpSpec {
            hidden: vec![6],
            ..MlpSpec::default()
        };
        let mut p = MlpParams::<f64>::zeros(&a);
        let g = MlpParams::<f64>::zeros(&b);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert!(matches!(adam_step(&mut p, &g, &mut st), Err(Error::Argument(_))));
    }

    #[test]
    fn cosine_decay_endpoints() {
        let c = AdamConfig::with_lr(1e-3).with_cosine_decay(100);
        assert_eq!(c.lr_at(0), 1e-3);
        assert!((c.lr_at(50) - 1e-3 * 0.51).abs() < 1e-15);
        assert!((c.lr_at(100) - 2e-5).abs() < 1e-18);
        assert_eq!(c.lr_at(1000), c.lr_at(100));
        assert_eq!(AdamConfig::with_lr(1e-3).lr_at(10_000), 1e-3);
        assert!(AdamConfig::with_lr(0.0).validate().is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = MlpSpec::default();
        s.time_embed_dim = 3;
        assert!(s.validate().is_err());
        s.time_embed_dim = 4;
        s.hidden = vec![4, 0];
        assert!(s.validate().is_err());
        assert_eq!(MlpSpec::default().num_params(), 2 * 256 + 256 + 256 * 64 + 256 + 2 * (256 * 256 + 256) + 2 * 256 + 2);
    }
}
