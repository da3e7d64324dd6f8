//! Hierarchical multiscale LSTM.
//!
//! A stack of LSTM layers in which every layer but the last owns a binary
//! boundary detector. Boundaries from the layer below and from the layer's
//! own previous step choose one of three operations per step: UPDATE,
//! COPY or FLUSH. Training runs through a small reverse-mode tape with a
//! straight-through estimator for the binary decisions.

pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod hm_cell;
pub mod network;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
