//! Variance-preserving noise schedule and the forward noising map.

use crate::autodiff::Tensor;
use crate::config::{ScheduleKind, WeightMode};
use crate::error::{Error, Result};

/// Floor applied to the sigma^2 loss weighting so every step trains.
const W_FLOOR: f32 = 1e-6;

/// Per-timestep coefficients of a discrete variance-preserving process.
/// Index 0 is the clean end (alpha = 1, sigma = 0); the last index is close
/// to pure noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub t_steps: usize,
    pub alpha: Vec<f32>,
    pub sigma: Vec<f32>,
    pub w: Vec<f32>,
}

/// Builds a schedule of `t_steps` entries. Cosine: alpha_t = cos(pi/2 * t/T);
/// linear: alpha_t^2 = 1 - t/T. Both keep alpha^2 + sigma^2 = 1 by
/// construction and alpha strictly positive at the noisy end.
pub fn make_schedule(
    t_steps: usize,
    kind: ScheduleKind,
    weight_mode: WeightMode,
) -> Result<DiffusionSchedule> {
    if t_steps < 2 {
        return Err(Error::Config(format!("t_steps must be >= 2, got {t_steps}")));
    }
    let mut alpha = Vec::with_capacity(t_steps);
    let mut sigma = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let frac = t as f32 / t_steps as f32;
        let (a, s) = match kind {
            ScheduleKind::Cosine => {
                let phase = std::f32::consts::FRAC_PI_2 * frac;
                (phase.cos(), phase.sin())
            }
            ScheduleKind::Linear => ((1.0 - frac).sqrt(), frac.sqrt()),
        };
        alpha.push(a);
        sigma.push(s);
    }
    let w = sigma
        .iter()
        .map(|&s| match weight_mode {
            WeightMode::SigmaSq => (s * s).max(W_FLOOR),
            WeightMode::One => 1.0,
        })
        .collect();
    Ok(DiffusionSchedule { t_steps, alpha, sigma, w })
}

impl DiffusionSchedule {
    /// Nearest timestep index for a fraction of the process.
    pub fn index_for_fraction(&self, frac: f32) -> usize {
        let t = (frac * (self.t_steps - 1) as f32).round() as isize;
        t.clamp(0, self.t_steps as isize - 1) as usize
    }
}

/// Forward noising: x_t = alpha_t * x0 + sigma_t * eps, elementwise and
/// exact. `eps` must match `x0`'s shape.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    if t >= schedule.t_steps {
        return Err(Error::Input(format!(
            "timestep {t} out of range (schedule has {} steps)",
            schedule.t_steps
        )));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "noise shape {:?} does not match image shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let (a, s) = (schedule.alpha[t], schedule.sigma[t]);
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + s * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}
