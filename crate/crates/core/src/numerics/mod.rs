//! Dense tensors, a reverse-mode autodiff tape and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Floating-point element type: `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + FromPrimitive + Sum + Debug + Default + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}
