//! Part-aware 3D Gaussian reconstruction of articulated objects.
//!
//! Given multi-view images of an object in two joint states, the pipeline
//! fits a static Gaussian model to the start state, predicts a per-Gaussian
//! deformation toward the end state, segments the movable part, estimates a
//! revolute or prismatic joint, and finally refines everything jointly.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod deform;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod rotation;
pub mod sh;
pub mod spatial;
pub mod synth;
pub mod view;

pub use camera::Camera;
pub use error::{Error, Result};
pub use gaussian::{split_by_mask, Gaussian, GaussianCloud};
pub use image::Image;
pub use view::View;
