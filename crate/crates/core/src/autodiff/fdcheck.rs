//! Central finite-difference oracle used by unit tests and the acceptance
//! suite to validate analytic gradients. Kept independent of the tape: it
//! only re-evaluates a closure at perturbed inputs.

/// d f / d x_i via central differences at step `h`, one coordinate at a time.
pub fn central_diff_grad(x: &[f32], h: f32, mut f: impl FnMut(&[f32]) -> f32) -> Vec<f32> {
    let mut pert = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = pert[i];
        pert[i] = orig + h;
        let fp = f(&pert);
        pert[i] = orig - h;
        let fm = f(&pert);
        pert[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Relative error between two gradient vectors, measured at the norm level:
/// `|a - n| / max(|a|, |n|)`. Elementwise comparison is ill-conditioned in
/// f32 (the central-difference numerator loses ~eps*|f|/(2h) absolute
/// precision per entry), so gradients are compared as vectors with f64
/// accumulation of the norms.
pub fn rel_error_norm(analytic: &[f32], numeric: &[f32]) -> f32 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nn = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += ((a - n) as f64).powi(2);
        na += (a as f64).powi(2);
        nn += (n as f64).powi(2);
    }
    (diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)) as f32
}
