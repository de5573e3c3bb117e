//! Visibility-decoupled monocular semantic scene completion for desk-scale
//! voxel grids.
//!
//! A first network labels only the voxels the camera can see, using image
//! features lifted into the grid and a distance field around the visible
//! depth surface. A second, noise-conditioned 3D U-Net completes the rest of
//! the grid from those labels.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod grid;
pub mod lifting;
pub mod mae;
pub mod nn;
pub mod stage1;
pub mod synth;
pub mod tensor;
pub mod visibility;

pub use error::{Error, Result};
