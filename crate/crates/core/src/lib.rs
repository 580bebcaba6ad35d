//! Continual learning over a frozen backbone, decomposed into within-task
//! prediction, task-identity inference and task-adaptive prediction.

pub mod backbone;
pub mod datio;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod objectives;
pub mod statistics;
pub mod theory;

pub use error::{Error, Result};
