//! Nearness-of-Neighbors Attention (NONA) regression with SoftStep
//! learned attention masking, trained end-to-end through a minimal
//! reverse-mode differentiation tape, plus the k-NN / linear-regression
//! baselines, synthetic 2-D benchmarks, and executable checks of the
//! embedding-optimality conditions the MSE loss induces.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod nona;
pub mod similarity;
pub mod softstep;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
