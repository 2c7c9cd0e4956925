//! Over-dilution analysis for attributed graphs and the Node Attribute
//! Transformer (NATR).
//!
//! The crate is organised bottom-up: dense/sparse tensors and a reverse-mode
//! trace ([`autodiff`]), graph topology and GCN propagation ([`graph`]),
//! dilution factors ([`dilution`]), model layers ([`layers`], [`natr`],
//! [`model`]) and training/evaluation ([`trainer`], [`metrics`]).
//!
//! With the default `parallel` feature, row-wise kernels, per-node
//! propagation and Jacobian rows run on rayon; without it they run
//! sequentially with bit-identical results.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod dilution;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod jacobian;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod natr;
pub mod optim;
pub mod par;
pub mod report;
pub mod sparse;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Trace, Var};
pub use error::{Error, Result};
pub use graph::Graph;
pub use tensor::Tensor;
