//! Segmentation network built around large selective kernels and top-k sparse
//! channel attention, on a small from-scratch reverse-mode differentiation core.

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod lsk;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod par;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod tksa;

pub use error::{Error, Result};
pub use params::{ModelParams, ParamStore, ParamVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
