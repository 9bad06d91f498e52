//! Interleaved training of a shared differentiable encoder by multiple
//! learners, optimized end-to-end by hypergradient descent.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`tape`]), a mixed-operation encoder cell ([`supernet`]), stage
//! scheduling ([`schedule`]), the multi-level training engine ([`engine`]),
//! synthetic task generation ([`data`]), and independent finite-difference
//! oracles ([`verify`]).

pub mod data;
pub mod engine;
pub mod error;
pub mod schedule;
pub mod supernet;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{GradMap, ParamSet, Tensor};
