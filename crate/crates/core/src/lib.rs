//! Optimization of the robust global contrastive loss with interchangeable
//! normalizer estimators: exact oracle, mini-batch, moving average, and a
//! learned normalizer-prediction network trained alternately with the
//! encoders.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod encoders;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod npn;
pub mod numerics;
pub mod objective;
pub mod optim;
pub mod par;
pub mod trainers;

pub use error::{Error, Result};
