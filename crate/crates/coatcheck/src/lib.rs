//! Dataset coating and black-box data-usage verification for diffusion models.

pub mod attacks;
pub mod coating;
pub mod color;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod hypersphere;
pub mod meta;
pub mod nn;
pub mod pipeline;
pub mod stats;
