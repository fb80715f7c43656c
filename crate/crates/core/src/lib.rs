//! Early-exit inference over a frozen backbone: cascade-connected internal
//! classifiers, weighted geometric ensembles, exit policies, cost accounting
//! and the evaluation machinery around them.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod bundle;
pub mod checkpoint;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod rl;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Graph, Tensor, Var};
