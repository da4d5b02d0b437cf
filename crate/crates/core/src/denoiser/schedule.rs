//! Variance-preserving cosine noise schedule.

use crate::error::{Error, Result};

pub const MIN_STEPS: usize = 10;
pub const MAX_STEPS: usize = 1000;

/// `alpha[t]`, `sigma[t]`, `omega[t]` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
    pub omega: Vec<f64>,
}

/// Signal level of the cosine schedule at fraction `s = t / T`.
pub fn alpha_at(s: f64) -> f64 {
    let offset = 0.008;
    let u = (s + offset) / (1.0 + offset);
    (u * std::f64::consts::FRAC_PI_2).cos().max(0.0)
}

pub fn make_schedule(steps: usize) -> Result<NoiseSchedule> {
    if !(MIN_STEPS..=MAX_STEPS).contains(&steps) {
        return Err(Error::invalid(format!(
            "schedule length {steps} outside {MIN_STEPS}..={MAX_STEPS}"
        )));
    }
    let alpha: Vec<f64> = (0..=steps).map(|t| alpha_at(t as f64 / steps as f64)).collect();
    let sigma = alpha.iter().map(|a| (1.0 - a * a).sqrt()).collect();
    Ok(NoiseSchedule {
        steps,
        alpha,
        sigma,
        omega: vec![1.0; steps + 1],
    })
}

impl NoiseSchedule {
    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", self.steps)));
        }
        Ok(())
    }

    /// Fraction `t / T` fed to the network's time embedding.
    pub fn fraction(&self, t: usize) -> f64 {
        t as f64 / self.steps as f64
    }
}

/// `x_t = α_t·x + σ_t·ε`.
pub fn noisify(x: &[f32], t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    schedule.check(t)?;
    if x.len() != eps.len() {
        return Err(Error::invalid(format!("shape mismatch: x has {} values, ε has {}", x.len(), eps.len())));
    }
    Ok(noisify_with(x, eps, schedule.alpha[t], schedule.sigma[t]))
}

pub(crate) fn noisify_with(x: &[f32], eps: &[f32], alpha: f64, sigma: f64) -> Vec<f32> {
    x.iter()
        .zip(eps)
        .map(|(&x, &e)| (alpha * x as f64 + sigma * e as f64) as f32)
        .collect()
}
