//! Recurrent rolling convolution (RRC) single-stage object detector.
//!
//! The crate is `no_std` with `alloc`; file formats, the command line and
//! threading live in the companion `rrc` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod anchors;
pub mod backbone;
pub mod boxes;
pub mod detect;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
mod init;
mod kernels;
pub mod loss;
pub mod model;
pub mod params;
pub mod rrc;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, PoolMode, Var};
pub use params::{ParamId, ParamStore, SgdConfig};
pub use tensor::{Real, Tensor};
