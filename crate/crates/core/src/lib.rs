//! Sketch-guided object localization with cross-modal attention.
//!
//! A scene and one or more stroke sketches go in; boxes around every instance
//! of the sketched category come out. The image and sketch are encoded by
//! small convolutional stacks, the image features are reweighted by their
//! compatibility with the global sketch vector, a region proposal network runs
//! over the attended map, and a scoring head ranks the pooled proposals
//! against the sketch.

pub mod attention;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod proposals;
pub mod real;
pub mod scoring;
pub mod service;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{ParamId, ParamRegistry};
pub use real::Real;
pub use tensor::{FeatureMap, FeatureVector};
