//! Simulator and library for data-parallel training with very large total
//! minibatches on a single machine.
//!
//! The pieces compose into one recipe:
//!
//! * a hybrid momentum-SGD/RMSprop optimizer that starts as RMSprop and
//!   transitions smoothly to momentum SGD ([`optimizer`]),
//! * a linearly-scaled, slow-start learning-rate schedule ([`lr_schedule`]),
//! * batch normalization that keeps no moving averages and instead
//!   all-reduce-averages last-minibatch statistics before validation
//!   ([`syncbn`]),
//! * simulated synchronous workers whose gradients travel through an exact
//!   or half-precision ring all-reduce ([`collective`], [`trainer`]),
//! * an analytic latency/bandwidth cost model for scaling-efficiency curves
//!   ([`collective`]).
//!
//! Everything is deterministic per `(seed, config)`: the random generator is
//! counter-based ([`rng`]), collectives reduce in fixed ring order, and worker
//! parallelism never changes results.

pub mod binary16;
pub mod checkpoint;
pub mod collective;
pub mod config;
pub mod dataset;
pub mod error;
pub mod lr_schedule;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod runlog;
pub mod syncbn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
