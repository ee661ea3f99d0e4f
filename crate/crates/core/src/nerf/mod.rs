//! Differentiable radiance field and renderer: integrated positional
//! encoding, an albedo+density MLP, quadrature volume rendering with
//! Lambertian shading from density-gradient normals, and the field
//! regularizers.

pub mod camera;
pub mod field;
pub mod ipe;
pub mod losses;
pub mod render;

pub use camera::{random_upper_hemisphere, Camera, Vec3};
pub use field::{normals_from_density, FieldEval, FieldRole, NerfField};
pub use ipe::{anneal_lambda, ipe_encode, ipe_features};
pub use losses::{nerf_reg_loss, opacity_loss, orientation_loss};
pub use render::{
    lambert_shade, quadrature_weights, render_image, render_on_tape, RenderMode, RenderOutput,
    RenderSettings,
};
