//! Low-rank CNN compression: Tucker-2 factorized convolutions with a
//! differentiable, hardware-aware per-layer rank search.

pub mod checkpoint;
pub mod cli;
pub mod costmodel;
pub mod error;
pub mod netspec;
pub mod nn;
pub mod rankspace;
pub mod report;
pub mod search;
pub mod svd;
pub mod tensor;
mod textfmt;
pub mod tucker;

pub use error::{Error, Result};
pub use tensor::{Matrix, Tensor4};
pub use tucker::{ConvLayerSpec, RankPair, TuckerFactors};
