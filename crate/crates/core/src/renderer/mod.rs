//! Scene normalization, hemisphere cameras, randomized lighting and a small
//! software ray caster producing (image, mask) pairs and material swatches.

pub mod camera;
pub mod lighting;
pub mod raster;
pub mod render;
pub mod shape;

pub use camera::{camera_at, hemisphere_position, sample_camera, CameraPose, HemisphereSampler};
pub use lighting::{sample_lighting, swatch_rig, DirectionalLight, LightingEnv};
pub use raster::{Mask, Raster};
pub use render::{
    render_sphere_swatch, render_view, shade_buffer, shade_terms, specular_exponent, swatch_camera, swatch_geometry,
    swatch_sphere, trace_geometry, AffineShade, DomainStyle, GeometryBuffer, PixelGeometry, RealStyle,
    MIN_SWATCH_RESOLUTION,
};
pub use shape::{normalize_model, NormalizeTransform, Primitive, Shape, ShapeKind};
