//! Iterative reasoning over dialog history and video for video-grounded
//! dialog generation.

pub mod config;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod text_encoder;
pub mod visual_encoder;

pub use error::{Error, Result};
