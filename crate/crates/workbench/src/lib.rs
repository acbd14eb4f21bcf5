//! The std side of the attention-alignment workbench: datasets, parameter
//! archives and run manifests on disk, the annotation service, the study
//! drivers and the `gradia` command line.

pub mod archive;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod pngio;
pub mod run;
pub mod service;
pub mod study;

pub use error::{Result, WorkbenchError};
