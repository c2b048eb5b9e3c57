//! Training and evaluation of feed-forward ReLU classifiers under a joint
//! objective: linearized adversarial robustness, L0 sparsity through
//! hard-concrete gates, and CVaR-style stability over training subsets.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gates;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod train;

pub use autodiff::{Graph, NodeId, Op, Scalar, Tensor};
pub use error::{Error, Result};
