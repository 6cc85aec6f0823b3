//! Ancestral DDPM sampling with classifier-free guidance.

use autograd::Tensor;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{BatchKind, Denoiser, Routing};
use super::schedule::{cfg_combine, NoiseSchedule};
use super::tokens::CaptionTokens;
use crate::error::{Error, Result};
use crate::rng::{label, stream};
use crate::scene::Caption;
use crate::triplane::{PseudoImageStack, TriPlane};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f32,
    /// Clamp each intermediate `x̂0` to `[-1, 1]`.
    pub clip_denoised: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 50, cfg_scale: 5.0, clip_denoised: true }
    }
}

/// Decreasing timesteps `T, T - T/n, ..., T/n` on a uniform stride.
pub fn timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::OutOfRange { what: "sampling steps", detail: format!("{steps} not in [1, {t_max}]") });
    }
    Ok((1..=steps).rev().map(|k| (k * t_max).div_ceil(steps)).collect())
}

/// Guided `v` prediction for one chain.
pub fn guided_v(model: &Denoiser, z: &Tensor, t: usize, caption: CaptionTokens, scale: f32, routing: Routing) -> Result<Vec<f32>> {
    let n = z.shape()[0];
    let items = n / routing.attention_group;
    let ts = vec![t; n];
    let cond = || model.predict(z.clone(), &ts, &vec![caption; items], routing);
    let uncond = || model.predict(z.clone(), &ts, &vec![CaptionTokens::null(); items], routing);
    Ok(if scale == 1.0 {
        cond()?.into_data()
    } else if scale == 0.0 {
        uncond()?.into_data()
    } else {
        let (c, u) = (cond()?, uncond()?);
        u.data().iter().zip(c.data()).map(|(&u, &c)| cfg_combine(u, c, scale)).collect()
    })
}

/// Runs one chain of `n` images from unit noise and returns the final `x̂0`,
/// clamped to `[-1, 1]`.
pub fn sample_chain(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    caption: &Caption,
    kind: BatchKind,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<Vec<f32>> {
    let r = model.config.resolution;
    let n = kind.images_per_item();
    let shape = [n, 3, r, r];
    let len = n * 3 * r * r;
    let mut rng = stream(seed, &[label::SAMPLE]);
    let mut z: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let tokens = CaptionTokens::encode(caption);
    let ts = timesteps(schedule.t_max(), cfg.steps)?;
    let mut x0 = vec![0.0; len];
    for (i, &t) in ts.iter().enumerate() {
        let zt = Tensor::new(&shape, z.iter().map(|&v| v as f32).collect());
        let v = guided_v(model, &zt, t, tokens, cfg.cfg_scale, kind.into())?;
        let (at, st) = (schedule.alpha(t), schedule.sigma(t));
        for ((x, &zi), &vi) in x0.iter_mut().zip(&z).zip(&v) {
            let mut e = at * zi - st * vi as f64;
            if cfg.clip_denoised {
                e = e.clamp(-1.0, 1.0);
            }
            *x = e;
        }
        let Some(&s) = ts.get(i + 1) else { break };
        let (as_, ss) = (schedule.alpha(s), schedule.sigma(s));
        let a_ts = at / as_;
        let var_ts = st * st - a_ts * a_ts * ss * ss;
        let c_z = a_ts * ss * ss / (st * st);
        let c_x = as_ * var_ts / (st * st);
        let std = (var_ts * ss * ss / (st * st)).max(0.0).sqrt();
        for (zi, &xi) in z.iter_mut().zip(&x0) {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *zi = c_z * *zi + c_x * xi + std * noise;
        }
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { what: "sample", location: format!("seed {seed}") });
    }
    Ok(x0.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect())
}

/// Samples one triplane for `caption`.
pub fn sample(model: &Denoiser, schedule: &NoiseSchedule, caption: &Caption, cfg: &SampleConfig, seed: u64) -> Result<TriPlane> {
    let flat = sample_chain(model, schedule, caption, BatchKind::Triplane, cfg, seed)?;
    let flat: Vec<f64> = flat.into_iter().map(f64::from).collect();
    PseudoImageStack::from_flat(model.config.resolution, &flat)?.unpack()
}

/// Samples independent chains in parallel; each result depends only on its own
/// caption and seed.
pub fn sample_many(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    requests: &[(Caption, u64)],
    cfg: &SampleConfig,
) -> Result<Vec<TriPlane>> {
    requests.par_iter().map(|(c, seed)| sample(model, schedule, c, cfg, *seed)).collect()
}
