//! Command implementations behind the `svhdr` binary: dataset synthesis,
//! fusion, evaluation, training and gradient checks, plus configuration and
//! image file formats.

pub mod config;
pub mod error;
pub mod eval;
pub mod fuse;
pub mod gradsuite;
pub mod image_io;
pub mod manifest;
pub mod synthesize;
pub mod train;

pub use error::{PipelineError, Result};
