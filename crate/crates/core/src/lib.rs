//! Personality classification from user post histories: a batch encoder,
//! an embedding memory with exact and near-duplicate reuse, recurrent
//! classifier heads, and the training and evaluation loop around them.

mod binio;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod features;
pub mod heads;
pub mod linalg;
pub mod memory;
pub mod synthetic;
pub mod train;
