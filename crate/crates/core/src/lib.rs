//! Piecewise rectified flow at desk scale.
//!
//! A diffusion teacher (analytic Gaussian mixture or a small MLP) is
//! distilled into a student whose flow is straight inside each of `K` time
//! windows, so it samples in about `K` Euler steps. Every numeric type is
//! generic over [`Scalar`]; the aliases below fix it to `f64` (or `f32`
//! with the `32` suffix).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod perflow;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod solver;
pub mod teacher;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Condition label of one item; `None` is the null (unconditional) label.
pub type Label = Option<usize>;

pub type Schedule = schedule::NoiseSchedule<f64>;
pub type Partition = schedule::WindowPartition<f64>;
pub type Params = nn::MlpParams<f64>;
pub type Gmm = teacher::GmmSpec<f64>;
pub type Teacher = teacher::TeacherModel<f64>;
pub type Student = perflow::FlowModel<f64>;
pub type State = perflow::TrainState<f64>;
pub type Data = data::Dataset<f64>;
pub type DataSpec = data::DatasetSpec<f64>;
pub type Ckpt = checkpoint::Checkpoint<f64>;

pub type Schedule32 = schedule::NoiseSchedule<f32>;
pub type Partition32 = schedule::WindowPartition<f32>;
pub type Params32 = nn::MlpParams<f32>;
pub type Gmm32 = teacher::GmmSpec<f32>;
pub type Teacher32 = teacher::TeacherModel<f32>;
pub type Student32 = perflow::FlowModel<f32>;
pub type State32 = perflow::TrainState<f32>;
pub type Data32 = data::Dataset<f32>;
pub type Ckpt32 = checkpoint::Checkpoint<f32>;
