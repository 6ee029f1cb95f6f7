//! Attractor Patch Networks: a sparse, prototype-routed replacement for the
//! transformer feed-forward sublayer, with the training, continual-learning
//! and monitoring machinery needed to evaluate it.

pub mod apn;
pub mod checkpoint;
pub mod config;
pub mod continual;
pub mod data;
pub mod error;
pub mod model;
pub mod monitor;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
