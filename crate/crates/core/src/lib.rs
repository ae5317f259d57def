//! Core of the dynamic neural defense testbed.
//!
//! The crate is layered bottom-up: [`tensor`] and [`tape`] provide the
//! numeric substrate, [`models`] the trainable networks, [`attacks`] the
//! adversary, and [`defense`], [`sentinel`] and [`search`] the defender.
//! [`data`] and [`experiment`] drive end-to-end runs.

pub mod attacks;
pub mod bundle;
pub mod data;
pub mod defense;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod models;
pub mod optim;
pub mod search;
pub mod sentinel;
pub mod service;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Activation, LossKind, Tape, Var};
pub use tensor::Tensor;
