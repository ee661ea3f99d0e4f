//! Pinhole orbit cameras looking at the origin, z-up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f32; 3];

pub fn dot(a: Vec3, b: Vec3) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f32 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn scale3(a: Vec3, s: f32) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Camera pose and intrinsics. `right/up/forward` form an orthonormal basis
/// with `forward` pointing into the scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    /// Vertical field of view in radians.
    pub fov: f32,
    /// Square image side in pixels.
    pub resolution: usize,
}

impl Camera {
    /// Camera on the origin-centred orbit sphere. Azimuth 0 sits on +x
    /// looking back at the origin; azimuth grows counter-clockwise.
    pub fn orbit(
        azimuth_rad: f32,
        elevation_rad: f32,
        radius: f32,
        fov: f32,
        resolution: usize,
    ) -> Result<Camera> {
        if radius <= 0.0 {
            return Err(Error::Geometry(format!("orbit radius must be positive, got {radius}")));
        }
        let (sa, ca) = azimuth_rad.sin_cos();
        let (se, ce) = elevation_rad.sin_cos();
        let position = [radius * ca * ce, radius * sa * ce, radius * se];
        let forward = normalize(scale3(position, -1.0));
        let world_up = [0.0, 0.0, 1.0];
        let r = cross(forward, world_up);
        if norm(r) < 1e-6 {
            return Err(Error::Geometry(
                "degenerate camera: looking straight along the up axis".into(),
            ));
        }
        let right = normalize(r);
        let up = cross(right, forward);
        Ok(Camera { position, right, up, forward, fov, resolution })
    }

    /// Azimuth of the camera position, degrees in [0, 360).
    pub fn azimuth_deg(&self) -> f32 {
        let az = self.position[1].atan2(self.position[0]).to_degrees();
        (az + 360.0) % 360.0
    }

    pub fn radius(&self) -> f32 {
        norm(self.position)
    }

    /// Unit ray direction through the centre of pixel (row, col).
    pub fn ray_dir(&self, row: usize, col: usize) -> Vec3 {
        let n = self.resolution as f32;
        let t = (self.fov * 0.5).tan();
        let u = ((col as f32 + 0.5) / n * 2.0 - 1.0) * t;
        let v = (1.0 - (row as f32 + 0.5) / n * 2.0) * t;
        normalize(add3(
            self.forward,
            add3(scale3(self.right, u), scale3(self.up, v)),
        ))
    }

    /// All pixel rays in row-major order.
    pub fn rays(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.resolution * self.resolution);
        for row in 0..self.resolution {
            for col in 0..self.resolution {
                out.push(self.ray_dir(row, col));
            }
        }
        out
    }
}

/// Uniform direction on the upper hemisphere (z >= 0), pointing from the
/// surface toward the light.
pub fn random_upper_hemisphere<R: rand::Rng>(rng: &mut R) -> Vec3 {
    let z: f32 = rng.random::<f32>();
    let phi = rng.random::<f32>() * std::f32::consts::TAU;
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}
