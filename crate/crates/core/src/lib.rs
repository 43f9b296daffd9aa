//! Open-vocabulary detection on synthetic feature worlds: region-word
//! grounding with cross-attention consistency, followed by background-aware
//! classification over class embeddings.

pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod diffcore;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gradsuite;
pub mod io;
pub mod lsm;
pub mod matching;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod regions;
pub mod synthworld;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
