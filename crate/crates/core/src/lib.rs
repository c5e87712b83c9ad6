//! Scribble-supervised semantic segmentation on top of a frozen vision
//! transformer.
//!
//! A [`backbone::Backbone`] turns an image into a pyramid of patch-token
//! grids. [`fusion`] projects and merges the pyramid into one feature map,
//! [`decoder`] classifies each cell, and [`trainer`] fits both from sparse
//! scribbles. [`tiler`] runs the head over large images and [`metrics`]
//! scores the result against dense labels.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod error;
pub mod export;
pub mod featviz;
pub mod fusion;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod mask;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod stats;
pub mod synthetic;
pub mod tiler;
pub mod trainer;
pub mod tv;

pub use error::{Error, Result};
