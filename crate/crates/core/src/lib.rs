//! Core of the attention-alignment workbench.
//!
//! A small convolutional classifier with an explicit backward pass,
//! Grad-CAM attention, the reasonability matrix, the joint
//! prediction/attention fine-tuning objective, a synthetic
//! spurious-correlation benchmark with an oracle annotator, and the
//! training and evaluation loops that tie them together.
//!
//! The crate is `no_std` and only needs `alloc`; file formats, the CLI and
//! the annotation service live in the workbench crate.

#![no_std]

extern crate alloc;

pub mod attention;
pub mod dataset;
pub mod error;
pub mod grid;
mod linalg;
pub mod loss;
pub mod model;
pub mod reasonability;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
