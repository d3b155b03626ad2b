//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass. Parameters live in a [`ParamStore`]
//! outside the tape and are bound into each new tape with [`Tape::param`];
//! after [`Tape::backward`], [`ParamStore::accumulate_grads`] pulls their
//! gradients back out for an [`Optimizer`].

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod optim;
mod param;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{Adam, Optimizer, Sgd};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;
