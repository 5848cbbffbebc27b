//! File formats, parallel drivers, the sweep harness and the command-line
//! interface for `neurosel-core`.

pub mod cli;
pub mod config;
pub mod container;
pub mod demo;
pub mod error;
pub mod files;
pub mod pipeline;
pub mod report;
pub mod stop;
pub mod summary;
pub mod sweep;

pub use error::{NsError, Result};
