//! SVG handling for the vexel pipeline: parsing, lossless normalization,
//! rasterization, the matrix/embedding codec, and conditioning features.

pub mod codec;
pub mod conditioning;
pub mod normalize;
pub mod raster;
pub mod svg;
