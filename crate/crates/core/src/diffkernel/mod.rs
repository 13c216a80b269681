//! Dense arrays with reverse-mode automatic differentiation.
//!
//! The kernel covers exactly what the engine trains: matrix products,
//! convolutions, elementwise nonlinearities, reductions and gathers. Domain
//! modules add fused operations of their own by implementing [`Op`].

mod conv;
pub mod gradcheck;
pub mod gemm;
mod graph;
mod ops;
mod real;
mod tensor;

pub use conv::ConvGeom;
pub use graph::{BackwardCtx, Graph, Op, Var};
pub use ops::{bilinear_taps, broadcast_shape, relu, sigmoid, softplus, Elementwise};
pub use real::{Precision, Real};
pub use tensor::Tensor;
