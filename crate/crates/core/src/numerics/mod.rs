//! Self-contained f64 numerics: reverse-mode autodiff tensors, parameter
//! registry, Adam, finite-difference gradient checking, seeded RNG streams
//! and the binary checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_container, save_container, ContainerMeta, NamedArray};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{ParamSet, Parameter};
pub use rng::StreamRng;
pub use tensor::{no_grad, NoGradGuard, Tensor};
