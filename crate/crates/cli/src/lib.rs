//! Command-line driver for the functional scene graph pipeline: JSON
//! configuration, checkpointed stages and the annotation/inspection API.

pub mod config;
pub mod pipeline;
pub mod serve;
