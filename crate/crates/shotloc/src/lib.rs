//! Storage, file formats, job queue, HTTP service and CLI around
//! `shotloc-core`.

pub mod cli;
pub mod error;
pub mod formats;
pub mod jobs;
pub mod pipeline;
pub mod service;
pub mod store;
pub mod wav;

pub use error::{Error, Result};
