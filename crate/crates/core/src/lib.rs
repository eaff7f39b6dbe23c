//! Meta metric learning for few-shot classification.
//!
//! A matching network supplies the task-specific metric; a coordinate-wise
//! LSTM meta-learner learns both its initial parameters and the update rule
//! that adapts them to a new task.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod matching;
pub mod meta;
pub mod retrieval;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
