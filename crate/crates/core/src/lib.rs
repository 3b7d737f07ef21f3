//! Differentiable architecture search for small-footprint keyword spotting.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] / [`tape`] — dense tensors with reverse-mode automatic
//!   differentiation; everything else computes on this substrate.
//! * [`nn`] — parameter storage and the basic trainable layers
//!   (convolution, batch norm, linear).
//! * [`ops`] — the catalog of candidate cell operations (separable /
//!   dilated / regular convolutions, pooling, identity, zero).
//! * [`supernet`] — the continuous search network: cells as DAGs of
//!   mixed edges weighted by softmaxed architecture parameters.
//! * [`search`] — the alternating bi-level optimisation loop (Adam on
//!   the architecture weights, SGD with momentum and cosine annealing
//!   on the model weights).
//! * [`genotype`] — discretisation of trained architecture weights,
//!   instantiation of the final network, parameter accounting and
//!   from-scratch training.
//! * [`checkpoint`] — the flat binary parameter container used for
//!   search checkpoints and final models.
//! * [`synthetic`] — a built-in separable toy dataset so the whole
//!   pipeline runs without any audio on disk.
//! * [`reference`] — naive reference implementations kept solely as
//!   independent oracles for the test suites.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod genotype;
mod kernels;
pub mod nn;
pub mod ops;
pub mod reference;
pub mod rng;
pub mod scalar;
pub mod search;
pub mod supernet;
pub mod synthetic;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
