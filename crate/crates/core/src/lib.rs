//! Two-stage point-cloud recognition.
//!
//! A localization stage scores points with vector attention, groups them into
//! voxels and picks the most salient region. A focus stage keeps the top-K
//! points of that region and hands their features to a recurrent head.

pub mod attention;
pub mod config;
pub mod cost;
pub mod error;
pub mod focus;
pub mod heads;
pub mod ngsa;
pub mod numerics;
pub mod pipeline;
pub mod pointcloud;

pub use error::{Error, Result};
