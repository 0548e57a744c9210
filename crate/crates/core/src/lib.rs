//! Unified multi-task grounding of visual, language and activity queries
//! in long feature-grid videos.

pub mod commands;
pub mod data;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synthgen;
pub mod tensors;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
