//! Multi-task learning with automatically constructed auxiliary tasks.
//!
//! The pipeline: learn an embedding of the (unlabeled) inputs, cluster
//! randomly transformed copies of it with k-means to obtain pseudo-labelled
//! auxiliary tasks, then train a hard-parameter-sharing network whose shared
//! encoder is meta-updated so that a step on an auxiliary task lowers the
//! main-task loss. Single-task and joint multi-task baselines share the same
//! machinery.

pub mod data;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod taskgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, HvpMode, Tensor, Var};
