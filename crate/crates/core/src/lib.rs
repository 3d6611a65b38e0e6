//! A small, dependency-light deep-learning engine for studying what/where
//! convolutional networks: a linear-chain classifier, a variant with a pose
//! head grafted on top, and a variant whose pose head reads from several
//! depths at once. The crate covers training, pruning the pose machinery
//! away at test time, and the analysis tooling used to compare the variants.
//!
//! Everything is deterministic given a seed: weight init, batch order,
//! dropout, and data synthesis all flow from [`rng::Rng`] streams.

pub mod analysis;
pub mod data;
pub mod graph;
pub mod kernels;
pub mod netspec;
pub mod rng;
pub mod shapes;
pub mod tensor;
pub mod train;

pub use netspec::{ArchKind, NetworkSpec};
pub use tensor::{Real, Tensor, TensorError};
