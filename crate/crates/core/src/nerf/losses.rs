//! Field regularizers: the orientation penalty on back-facing normals and
//! the opacity sparsity term, both averaged over rays.

use crate::autodiff::{Tape, Tensor, Var};

/// `mean_rays sum_i stop_grad(w_i) max(0, n_i . v)`, exactly as printed:
/// no square on the hinge, `v` the lighting propagation direction, and no
/// gradient into the rendering weights. Invalid normals (mask 0) are
/// excluded.
pub fn orientation_loss(
    tape: &Tape,
    weights: &Var,
    normals: &Var,
    valid: &Tensor,
    v: [f32; 3],
) -> Var {
    let shape = weights.shape();
    let (r, s) = (shape[0], shape[1]);
    let vv = tape.constant_from(&[3, 1], v.to_vec());
    let facing = normals.matmul(&vv).relu(); // [R*S, 1]
    let masked = facing.mul(&tape.constant(valid));
    let per_ray = masked.reshape(&[r, s]).mul(&weights.stop_gradient()).sum_axis(1);
    per_ray.mean()
}

/// `mean_rays sqrt((sum_i w_i)^2 + 0.01)`.
pub fn opacity_loss(weights: &Var) -> Var {
    let total = weights.sum_axis(1); // [R]
    total.mul(&total).add_scalar(0.01).sqrt().mean()
}

/// Combined field regularization: opacity + orientation.
pub fn nerf_reg_loss(
    tape: &Tape,
    weights: &Var,
    normals: Option<&Var>,
    valid: Option<&Tensor>,
    v: [f32; 3],
) -> Var {
    let op = opacity_loss(weights);
    match (normals, valid) {
        (Some(n), Some(m)) => op.add(&orientation_loss(tape, weights, n, m, v)),
        _ => op,
    }
}
