//! Failure-localization environment and reward grading for microservice
//! telemetry.

pub mod batch;
pub mod component;
pub mod episode;
pub mod eval;
pub mod graders;
pub mod grpo;
pub mod pipeline;
pub mod policy;
pub mod synth;
pub mod telemetry;
pub mod tools;

pub use component::{ComponentLevel, ComponentRef};
