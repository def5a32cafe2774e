//! Small-large vision-language model collaboration.
//!
//! A small model with a tuning-free selected meta-adapter detects registered concepts in an
//! image; a large model verifies those detections with yes/no questions and answers the user
//! grounded on the sanitized report.

pub mod backends;
pub mod detection;
pub mod dictionary;
pub mod json_extract;
pub mod kmeans;
pub mod prompts;
pub mod reflection;
pub mod registry;
pub mod vector;
pub mod generation;
pub mod pipeline;
pub mod evaluation;
pub mod config;
pub mod service;
pub mod cli;
mod error;

pub use error::{Error, Result};
