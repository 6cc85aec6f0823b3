//! Variance-preserving noise schedule and the v-parameterization identities.

use crate::error::{Error, Result};

/// Default number of diffusion steps.
pub const DEFAULT_T: usize = 1000;
/// Default Min-SNR clamp.
pub const MIN_SNR_GAMMA: f64 = 5.0;
const COSINE_OFFSET: f64 = 0.008;

/// Cosine schedule `α_t = cos φ_t`, `σ_t = sin φ_t` with
/// `φ_t = (t/T + s)/(1 + s) · π/2`, so `α² + σ² = 1` holds by construction.
/// Timesteps run from 1 to `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(t_max: usize) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::OutOfRange { what: "diffusion steps", detail: format!("{t_max} < 2") });
        }
        let (alpha, sigma) = (0..=t_max)
            .map(|t| {
                let phi = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                let (s, c) = phi.sin_cos();
                (c, s)
            })
            .unzip();
        Ok(Self { alpha, sigma })
    }

    pub fn t_max(&self) -> usize {
        self.alpha.len() - 1
    }

    /// `α_t`; `t = 0` is the clean end of the schedule.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn snr(&self, t: usize) -> f64 {
        (self.alpha[t] / self.sigma[t]).powi(2)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::OutOfRange { what: "timestep", detail: format!("{t} not in [1, {}]", self.t_max()) });
        }
        Ok(())
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("diffusion tensor", a.len(), b.len()));
    }
    Ok(())
}

/// `z_t = α_t x0 + σ_t ε`.
pub fn add_noise(x0: &[f64], eps: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(x0, eps)?;
    s.check_t(t)?;
    let (a, g) = (s.alpha(t), s.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + g * e).collect())
}

/// `v = α_t ε − σ_t x0`.
pub fn v_target(x0: &[f64], eps: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(x0, eps)?;
    s.check_t(t)?;
    let (a, g) = (s.alpha(t), s.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * e - g * x).collect())
}

/// `x̂0 = α_t z − σ_t v`.
pub fn x0_from_v(alpha: f64, sigma: f64, z: f64, v: f64) -> f64 {
    alpha * z - sigma * v
}

/// `ε̂ = σ_t z + α_t v`.
pub fn eps_from_v(alpha: f64, sigma: f64, z: f64, v: f64) -> f64 {
    sigma * z + alpha * v
}

/// Min-SNR weight for the v-prediction loss, `min(snr, γ) / (snr + 1)`.
pub fn loss_weight(t: usize, s: &NoiseSchedule, gamma: f64) -> f64 {
    min_snr_weight(s.snr(t), gamma)
}

pub fn min_snr_weight(snr: f64, gamma: f64) -> f64 {
    snr.min(gamma) / (snr + 1.0)
}

/// Classifier-free guidance `v_u + s (v_c − v_u)`, exact at `s = 0` and `s = 1`.
pub fn cfg_combine(uncond: f32, cond: f32, scale: f32) -> f32 {
    if scale == 0.0 {
        uncond
    } else if scale == 1.0 {
        cond
    } else {
        uncond + scale * (cond - uncond)
    }
}
