//! Landmark-based visual localization: map building from a multi-view
//! reconstruction, sparse landmark recognition, progressive landmark-wise
//! pose estimation and a synthetic benchmark harness.

pub mod geometry;
pub mod map;
pub mod builder;
pub mod recognition;
pub mod localizer;
pub mod synth;
