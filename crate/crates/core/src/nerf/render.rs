//! Differentiable volume rendering: stratified samples along pixel rays,
//! transmittance quadrature, Lambertian shading from density-gradient
//! normals, white-background compositing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nerf::camera::{add3, scale3, Camera, Vec3};
use crate::nerf::field::{normalize_neg_grad, NerfField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Shaded,
    Albedo,
    Textureless,
}

/// Shared Lambertian shading formula: `albedo * max(0, n.l) + ambient`,
/// clamped to the displayable range. The analytic oracle renderer uses this
/// exact function so shading never differs between the two render paths.
pub fn lambert_shade(albedo: [f32; 3], n_dot_l: f32, ambient: f32) -> [f32; 3] {
    let d = n_dot_l.max(0.0);
    [
        (albedo[0] * d + ambient).clamp(0.0, 1.0),
        (albedo[1] * d + ambient).clamp(0.0, 1.0),
        (albedo[2] * d + ambient).clamp(0.0, 1.0),
    ]
}

/// Per-ray quadrature products of one render.
pub struct Quadrature {
    /// `[R, S]` rendering weights `w_i = T_i (1 - exp(-sigma_i delta))`.
    pub weights: Var,
    /// `[R]` accumulated opacity.
    pub opacity: Var,
}

/// Builds quadrature weights from densities `[R, S]` under a fixed interval
/// length `delta`.
pub fn quadrature_weights(sigma: &Var, delta: f32) -> Quadrature {
    let sd = sigma.scale(delta);
    let trans = sd.cumsum_exclusive(1).neg().exp();
    let absorb = sd.neg().exp().neg().add_scalar(1.0); // 1 - exp(-sigma delta)
    let weights = trans.mul(&absorb);
    let opacity = weights.sum_axis(1);
    Quadrature { weights, opacity }
}

pub struct RenderSettings<'a> {
    pub samples_per_ray: usize,
    /// Ray march covers `[radius - bound, radius + bound]` around the orbit.
    pub scene_bound: f32,
    pub mode: RenderMode,
    /// Unit vector from surfaces toward the light.
    pub light: Vec3,
    pub ambient: f32,
    /// Stratified jitter source; midpoint sampling when absent.
    pub jitter: Option<&'a mut ChaCha8Rng>,
    /// Optional row-major pixel subset to render.
    pub pixels: Option<&'a [usize]>,
}

pub struct RenderOutput {
    /// `[R, 3]` composited colors in the requested mode.
    pub image: Var,
    /// `[R, S]` rendering weights (kept for regularizers).
    pub weights: Var,
    /// `[R]` opacity map.
    pub opacity: Var,
    /// `[R * S, 3]` unit sample normals (shaded/textureless modes).
    pub normals: Option<Var>,
    /// `[R * S, 1]` validity mask for the normals.
    pub normals_valid: Option<Tensor>,
    /// `[R]` opacity-weighted mean ray depth (value only).
    pub depth: Tensor,
    /// Number of rays rendered.
    pub rays: usize,
}

/// Renders `camera`'s pixels (or a subset) through `field` on `tape`.
pub fn render_on_tape(
    tape: &Tape,
    field: &NerfField,
    camera: &Camera,
    settings: &mut RenderSettings,
) -> Result<RenderOutput> {
    let s = settings.samples_per_ray;
    let radius = camera.radius();
    let near = radius - settings.scene_bound;
    let far = radius + settings.scene_bound;
    if near <= 0.0 {
        return Err(Error::Geometry(format!(
            "camera radius {radius} inside the scene bound {}",
            settings.scene_bound
        )));
    }
    let delta = (far - near) / s as f32;

    let all_dirs;
    let dirs: Vec<Vec3> = match settings.pixels {
        Some(idx) => {
            all_dirs = camera.rays();
            idx.iter().map(|&p| all_dirs[p]).collect()
        }
        None => camera.rays(),
    };
    let r = dirs.len();

    // stratified sample positions along each ray
    let mut t_vals = Vec::with_capacity(r * s);
    let mut points = Vec::with_capacity(r * s * 3);
    for dir in &dirs {
        for i in 0..s {
            let u: f32 = match settings.jitter.as_deref_mut() {
                Some(rng) => rng.random(),
                None => 0.5,
            };
            let t = near + (i as f32 + u) * delta;
            t_vals.push(t);
            let p = add3(camera.position, scale3(*dir, t));
            points.extend_from_slice(&p);
        }
    }

    let needs_normals = matches!(settings.mode, RenderMode::Shaded | RenderMode::Textureless);
    let eval = field.eval_on_tape(tape, &points, settings.mode != RenderMode::Textureless, needs_normals);

    let sigma = eval.sigma.reshape(&[r, s]);
    let quad = quadrature_weights(&sigma, delta);

    let (normals, normals_valid, sample_colors) = match settings.mode {
        RenderMode::Albedo => (None, None, eval.albedo.expect("albedo requested")),
        RenderMode::Shaded | RenderMode::Textureless => {
            let grad = eval.sigma_grad.expect("normals requested");
            let (normals, valid) = normalize_neg_grad(tape, &grad);
            let l = tape.constant_from(&[3, 1], settings.light.to_vec());
            let n_dot_l = normals.matmul(&l).relu(); // [R*S, 1]
            // albedo * max(0, n.l) + ambient, with albedo == 1 when textureless
            let color = match settings.mode {
                RenderMode::Textureless => n_dot_l
                    .add_scalar(settings.ambient)
                    .mul(&tape.constant(&Tensor::full(&[r * s, 3], 1.0))),
                _ => {
                    let albedo = eval.albedo.expect("albedo requested");
                    albedo.mul(&n_dot_l).add_scalar(settings.ambient)
                }
            };
            (Some(normals), Some(valid), color)
        }
    };

    // composite: sum_i w_i c_i + (1 - opacity) * white
    let w3 = quad.weights.reshape(&[r, s, 1]);
    let colors = sample_colors.reshape(&[r, s, 3]);
    let fg = colors.mul(&w3).sum_axis(1); // [R, 3]
    let bg_weight = quad.opacity.neg().add_scalar(1.0).reshape(&[r, 1]);
    let white = tape.constant(&Tensor::full(&[1, 3], 1.0));
    let image = fg.add(&bg_weight.mul(&white)).clamp(0.0, 1.0);

    // value-only opacity-weighted depth
    let w_vals = quad.weights.value();
    let op_vals = quad.opacity.value();
    let mut depth = Vec::with_capacity(r);
    for ray in 0..r {
        let mut acc = 0.0f32;
        for i in 0..s {
            acc += w_vals.data()[ray * s + i] * t_vals[ray * s + i];
        }
        depth.push(acc / op_vals.data()[ray].max(1e-6));
    }

    Ok(RenderOutput {
        image,
        weights: quad.weights,
        opacity: quad.opacity,
        normals,
        normals_valid,
        depth: Tensor::from_vec(&[r], depth),
        rays: r,
    })
}

/// Convenience non-differentiable full-frame render to an `[H, W, 3]` image.
pub fn render_image(
    field: &NerfField,
    camera: &Camera,
    samples_per_ray: usize,
    scene_bound: f32,
    mode: RenderMode,
    light: Vec3,
    ambient: f32,
) -> Result<Tensor> {
    let tape = Tape::new();
    let mut settings = RenderSettings {
        samples_per_ray,
        scene_bound,
        mode,
        light,
        ambient,
        jitter: None,
        pixels: None,
    };
    let out = render_on_tape(&tape, field, camera, &mut settings)?;
    let n = camera.resolution;
    out.image.value().reshaped(&[n, n, 3])
}
