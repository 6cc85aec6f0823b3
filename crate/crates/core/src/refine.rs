//! Score-distillation refinement of a sampled triplane and a private decoder copy.
//!
//! Each step renders one random view at the denoiser's resolution, noises it at
//! a small timestep, and pushes the render along the guided residual
//! `σ_t² (ε̂ − ε)`. The denoiser is only read.

use autograd::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::diffusion::sample::guided_v;
use crate::diffusion::schedule::{eps_from_v, NoiseSchedule};
use crate::diffusion::{BatchKind, CaptionTokens, Denoiser};
use crate::error::{Error, Result};
use crate::fitting::loss::{loss_reg, loss_reg_grad};
use crate::fitting::Adam;
use crate::rng::{derive, label, stream};
use crate::scene::Caption;
use crate::triplane::{DecoderParams, TriPlane};
use crate::volrend::{all_pixels, make_rays, render_rays, render_rays_with_grad, ParamGrads, Ray, RayGrad, SamplingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub steps: usize,
    /// Timestep range as fractions of `T`.
    pub t_min: f64,
    pub t_max: f64,
    pub cfg_scale: f32,
    pub views_per_step: usize,
    pub lr_triplane: f64,
    pub lr_decoder: f64,
    pub l2_weight: f64,
    pub tv_weight: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            t_min: 0.1,
            t_max: 0.5,
            cfg_scale: 20.0,
            views_per_step: 1,
            lr_triplane: 5e-3,
            lr_decoder: 1e-4,
            l2_weight: 0.025,
            tv_weight: 0.025,
            n_samples: 64,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::OutOfRange { what: "refinement configuration", detail });
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return bad(format!("need 0 < t_min < t_max <= 1, got {} and {}", self.t_min, self.t_max));
        }
        if !(self.cfg_scale >= 1.0) {
            return bad(format!("cfg scale {} < 1", self.cfg_scale));
        }
        if self.views_per_step == 0 || self.n_samples < 2 {
            return bad("views_per_step must be positive and n_samples at least 2".into());
        }
        if !(self.lr_triplane >= 0.0 && self.lr_decoder >= 0.0 && self.l2_weight >= 0.0 && self.tv_weight >= 0.0) {
            return bad("learning rates and weights must be non-negative".into());
        }
        Ok(())
    }

    /// Integer timestep bounds `[⌈t_min T⌉, ⌊t_max T⌋]`.
    pub fn timestep_range(&self, t_total: usize) -> Result<(usize, usize)> {
        let lo = ((self.t_min * t_total as f64).ceil() as usize).max(1);
        let hi = (self.t_max * t_total as f64).floor() as usize;
        if lo > hi {
            return Err(Error::OutOfRange { what: "refinement timesteps", detail: format!("empty range [{lo}, {hi}]") });
        }
        Ok((lo, hi))
    }
}

/// The SDS residual `w (ε̂ − ε)`.
pub fn sds_gradient(eps_hat: &[f64], eps: &[f64], weight: f64) -> Vec<f64> {
    eps_hat.iter().zip(eps).map(|(a, b)| weight * (a - b)).collect()
}

/// Rays of a square view at the denoiser resolution, with their pixel indices.
pub struct ViewRays {
    pub resolution: usize,
    pub pixels: Vec<usize>,
    pub rays: Vec<Ray>,
}

impl ViewRays {
    pub fn new(camera: &CameraPose, resolution: usize) -> Result<Self> {
        let rays = make_rays(camera, resolution, resolution, &all_pixels(resolution, resolution))?;
        let (pixels, rays) = rays.into_iter().enumerate().filter_map(|(i, r)| r.map(|r| (i, r))).unzip();
        Ok(Self { resolution, pixels, rays })
    }

    /// Planar `[-1, 1]` image; pixels without a ray are black.
    pub fn render(&self, tp: &TriPlane, dec: &DecoderParams, sampling: &SamplingConfig) -> Result<Vec<f64>> {
        let outs = render_rays(tp, dec, &self.rays, sampling)?;
        let n = self.resolution * self.resolution;
        let mut x = vec![-1.0; 3 * n];
        for (&p, o) in self.pixels.iter().zip(&outs) {
            for k in 0..3 {
                x[k * n + p] = 2.0 * o.color[k] - 1.0;
            }
        }
        Ok(x)
    }

    /// Value and gradient of the surrogate `mean(g · x)` with `g` held fixed.
    pub fn surrogate(&self, tp: &TriPlane, dec: &DecoderParams, sampling: &SamplingConfig, g: &[f64]) -> Result<(f64, ParamGrads)> {
        let n = self.resolution * self.resolution;
        let scale = 1.0 / (3 * n) as f64;
        let (outs, grads) = render_rays_with_grad(tp, dec, &self.rays, sampling, |i, _| {
            let p = self.pixels[i];
            RayGrad { color: [0, 1, 2].map(|k| 2.0 * g[k * n + p] * scale), ..RayGrad::default() }
        })?;
        let mut value = -g.iter().sum::<f64>() * scale;
        for (&p, o) in self.pixels.iter().zip(&outs) {
            for k in 0..3 {
                value += g[k * n + p] * 2.0 * o.color[k] * scale;
            }
        }
        Ok((value, grads))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdsInfo {
    pub t: usize,
    pub surrogate: f64,
}

/// One score-distillation gradient for a single view.
#[allow(clippy::too_many_arguments)]
pub fn sds_step(
    tp: &TriPlane,
    dec: &DecoderParams,
    camera: &CameraPose,
    caption: &CaptionTokens,
    model: &Denoiser,
    schedule: &NoiseSchedule,
    cfg: &RefineConfig,
    sampling: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<(ParamGrads, SdsInfo)> {
    let (lo, hi) = cfg.timestep_range(schedule.t_max())?;
    let res = model.config.resolution;
    let view = ViewRays::new(camera, res)?;
    let x = view.render(tp, dec, sampling)?;
    let t = rng.random_range(lo..=hi);
    let eps: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(rng)).collect();
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let z: Vec<f64> = x.iter().zip(&eps).map(|(x, e)| a * x + s * e).collect();
    let zt = Tensor::new(&[1, 3, res, res], z.iter().map(|&v| v as f32).collect());
    let v = guided_v(model, &zt, t, *caption, cfg.cfg_scale, BatchKind::Image2D.into())?;
    let eps_hat: Vec<f64> = z.iter().zip(&v).map(|(&z, &v)| eps_from_v(a, s, z, v as f64)).collect();
    let g = sds_gradient(&eps_hat, &eps, s * s);
    let (surrogate, grads) = view.surrogate(tp, dec, sampling, &g)?;
    Ok((grads, SdsInfo { t, surrogate }))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub surrogate: Vec<f64>,
    pub timesteps: Vec<usize>,
}

/// Refines `tp0` with a private copy of `dec`; returns both and the per-step log.
/// The final triplane is clamped to `[-1, 1]`.
pub fn refine(
    tp0: &TriPlane,
    dec: &DecoderParams,
    caption: &Caption,
    model: &Denoiser,
    schedule: &NoiseSchedule,
    cfg: &RefineConfig,
) -> Result<(TriPlane, DecoderParams, RefineReport)> {
    cfg.validate()?;
    cfg.timestep_range(schedule.t_max())?;
    let mut tp = tp0.clone();
    let mut dec = dec.clone();
    let tokens = CaptionTokens::encode(caption);
    let mut adam_tp = Adam::new(tp.len());
    let mut adam_dec = Adam::new(dec.len());
    let mut report = RefineReport::default();
    for step in 0..cfg.steps {
        let mut rng = stream(cfg.seed, &[label::REFINE, step as u64]);
        let mut grads = ParamGrads::zeros(&tp, &dec);
        let mut surrogate = 0.0;
        for view in 0..cfg.views_per_step {
            let camera = CameraPose::sample(&mut rng);
            let sampling = SamplingConfig::train(cfg.n_samples, derive(cfg.seed, &[label::JITTER, step as u64, view as u64]));
            let (g, info) = sds_step(&tp, &dec, &camera, &tokens, model, schedule, cfg, &sampling, &mut rng)?;
            grads.add(&g);
            surrogate += info.surrogate;
            report.timesteps.push(info.t);
        }
        let inv = 1.0 / cfg.views_per_step as f64;
        grads.triplane.iter_mut().chain(grads.decoder.iter_mut()).for_each(|v| *v *= inv);
        loss_reg_grad(&tp, cfg.l2_weight, cfg.tv_weight, &mut grads.triplane);
        if !grads.is_finite() {
            return Err(Error::NonFinite { what: "refinement gradient", location: format!("step {step}") });
        }
        let (l2, tv) = loss_reg(&tp);
        let total = surrogate * inv + cfg.l2_weight * l2 + cfg.tv_weight * tv;
        if !total.is_finite() {
            return Err(Error::Divergence { phase: "refinement", step, loss: total });
        }
        adam_tp.step(tp.values_mut(), &grads.triplane, cfg.lr_triplane);
        adam_dec.step(dec.params_mut().iter_mut(), &grads.decoder, cfg.lr_decoder);
        report.surrogate.push(surrogate * inv);
    }
    tp.clamp(-1.0, 1.0);
    Ok((tp, dec, report))
}
