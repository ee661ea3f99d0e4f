//! Integrated positional encoding with isotropic covariance: per coordinate
//! and band, `[sin(2^l u), cos(2^l u)] * exp(-2^(2l-1) lambda^2)`. Features
//! are laid out coordinate-major (`[coord0 bands..., coord1 ..., coord2 ...]`)
//! so per-coordinate reductions are contiguous.

use crate::autodiff::Tensor;

/// Attenuation of band `l` under blur scale `lambda`.
pub fn band_attenuation(l: usize, lambda: f32) -> f32 {
    (-(2.0f32).powi(2 * l as i32 - 1) * lambda * lambda).exp()
}

/// Encodes one point; output length `6 * l_bands`.
pub fn ipe_encode(mu: [f32; 3], lambda: f32, l_bands: usize) -> Vec<f32> {
    assert!(l_bands >= 1);
    let mut out = Vec::with_capacity(6 * l_bands);
    for &u in &mu {
        for l in 0..l_bands {
            let s = (2.0f32).powi(l as i32);
            let a = band_attenuation(l, lambda);
            out.push((s * u).sin() * a);
            out.push((s * u).cos() * a);
        }
    }
    out
}

/// Batched encoding of `[N, 3]` points into `[N, 6 * l_bands]` features.
pub fn ipe_features(points: &[f32], lambda: f32, l_bands: usize) -> Tensor {
    let n = points.len() / 3;
    let f = 6 * l_bands;
    let mut data = Vec::with_capacity(n * f);
    for p in points.chunks_exact(3) {
        data.extend_from_slice(&ipe_encode([p[0], p[1], p[2]], lambda, l_bands));
    }
    Tensor::from_vec(&[n, f], data)
}

/// Per-feature derivative with respect to its own coordinate, same layout as
/// [`ipe_features`]. Positions are not trainable, so these enter tapes as
/// constants when building density input-gradients.
pub fn ipe_feature_grads(points: &[f32], lambda: f32, l_bands: usize) -> Tensor {
    let n = points.len() / 3;
    let f = 6 * l_bands;
    let mut data = Vec::with_capacity(n * f);
    for p in points.chunks_exact(3) {
        for &u in p {
            for l in 0..l_bands {
                let s = (2.0f32).powi(l as i32);
                let a = band_attenuation(l, lambda);
                data.push(s * (s * u).cos() * a);
                data.push(-s * (s * u).sin() * a);
            }
        }
    }
    Tensor::from_vec(&[n, f], data)
}

/// Coarse-to-fine schedule: linear ramp from `hi` to `lo` over the first
/// `fraction` of iterations, then constant `lo`.
pub fn anneal_lambda(iter: usize, total: usize, hi: f32, lo: f32, fraction: f32) -> f32 {
    debug_assert!(hi >= lo && lo >= 0.0);
    let ramp = (total as f32 * fraction).max(1.0);
    let t = (iter as f32 / ramp).min(1.0);
    hi + (lo - hi) * t
}
