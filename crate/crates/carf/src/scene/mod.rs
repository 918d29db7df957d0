//! Synthetic ground truth and rendering: procedural 2D textures, analytic 3D
//! primitive scenes, pinhole cameras, stratified ray sampling, reference
//! renders, and model renders.

pub mod camera;
pub mod image;
pub mod primitives;
pub mod render;
pub mod texture;
