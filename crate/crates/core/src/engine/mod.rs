//! Minimal reverse-mode differentiation over the tensor operations used by
//! the network and loss stack, plus the AdamW optimizer, the exponential
//! learning-rate schedule, and a finite-difference gradient verifier.

mod graph;
mod optim;

pub use graph::{conv2d_reference, Gradients, Graph, NodeId, Scalar};
pub use optim::{adamw_step, decay_lr, fd_check, AdamWConfig, FdReport, OptimState};
