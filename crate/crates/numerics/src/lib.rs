//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit and row-major. A [`Graph`] records operations on
//! 2-D values during the forward pass; [`Graph::backward`] replays them in
//! reverse. Trainable parameters live in a [`ParamStore`] and are copied
//! into a graph as leaves for each forward pass.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod segments;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use nn::{ParamId, ParamStore};
pub use optim::{Adam, AdamConfig, OptimState, OptimVariant};
pub use rng::SeedStream;
pub use segments::Segments;
pub use tensor::Tensor;
