//! Detector-free image and video captioning with window-based spatial-MLP
//! and attention encoders.
//!
//! The crate is layered bottom-up: [`tensor`] provides dense arrays and
//! reverse-mode autodiff, [`patching`] turns pixels into token grids and
//! implements window geometry, [`mixers`] holds the interchangeable token
//! mixers, [`encoder`] and [`decoder`] assemble the captioner, and
//! [`train`], [`metrics`] and [`complexity`] cover optimization, scoring
//! and cost accounting.

pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod mixers;
pub mod model;
pub mod nn;
pub mod optim;
pub mod patching;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
