//! Deterministic `f64` tensors with reverse-mode differentiation, restricted
//! to the layers, losses and optimizer the assessment networks use.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use params::{is_kernel, Binder, Gradients, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// SELU scale λ.
pub const SELU_LAMBDA: f64 = 1.0507009873554805;
/// SELU α.
pub const SELU_ALPHA: f64 = 1.6732632423543772;
