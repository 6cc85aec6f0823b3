//! Depth-aware triplane fitting.
//!
//! Two phases: a shared decoder is trained jointly with the triplanes of a
//! small subset of objects, then frozen while every object's triplane is
//! fitted on its own. The objective per step is
//!
//! ```text
//! L = L_color + λ_mask L_mask + λ_depth L_depth + λ_L2 L_L2 + λ_TV L_TV + λ_hull L_hull
//! ```
//!
//! evaluated on a random batch of rays drawn from all training views.

mod adam;
pub mod loss;

use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use loss::{total_loss, LossComponents, LossWeights};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::rng::{derive, label, stream, Rng};
use crate::scene::{make_hull_masks, render_oracle_view, HullMasks, SceneSpec, ViewRecord};
use crate::triplane::{DecoderParams, TriPlane, DEFAULT_CHANNELS};
use crate::volrend::{render_rays_with_grad, render_view, ParamGrads, Ray, RayGrad, RenderOutput, SamplingConfig};
use crate::workbench::metrics::{depth_mae, mask_iou, psnr, ViewMetrics};

/// How fitted values are brought into `[−1, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Finalize {
    /// Clip every value.
    #[default]
    Clamp,
    /// Divide by the largest magnitude when it exceeds 1.
    Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub weights: LossWeights,
    pub rays_per_step: usize,
    pub steps: usize,
    /// Triplane learning rate at step 0, decayed linearly to 0.
    pub lr: f64,
    /// Constant decoder learning rate during shared training.
    pub decoder_lr: f64,
    pub n_samples: usize,
    pub resolution: usize,
    pub channels: usize,
    pub init_std: f64,
    pub finalize: Finalize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            rays_per_step: 4096,
            steps: 2000,
            lr: 2e-2,
            decoder_lr: 1e-3,
            n_samples: 64,
            resolution: 64,
            channels: DEFAULT_CHANNELS,
            init_std: 0.05,
            finalize: Finalize::Clamp,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |what: &'static str, detail: String| Err(Error::OutOfRange { what, detail });
        if self.rays_per_step == 0 {
            return bad("rays per step", "0".into());
        }
        if self.resolution < 2 {
            return bad("triplane resolution", format!("{} < 2", self.resolution));
        }
        if self.channels == 0 {
            return bad("triplane channels", "0".into());
        }
        if !(self.lr >= 0.0 && self.decoder_lr >= 0.0 && self.init_std >= 0.0) {
            return bad("learning rate", format!("lr {} decoder_lr {} init_std {}", self.lr, self.decoder_lr, self.init_std));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        self.lr * (1.0 - step as f64 / self.steps.max(1) as f64)
    }
}

/// Cameras and image size for the supervision views of one object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewPlan {
    pub train_views: usize,
    pub heldout_views: usize,
    pub image_size: usize,
}

impl Default for ViewPlan {
    fn default() -> Self {
        Self { train_views: 64, heldout_views: 4, image_size: 128 }
    }
}

/// Supervision for one object.
#[derive(Clone, Debug)]
pub struct FitTarget {
    pub views: Vec<ViewRecord>,
    pub heldout: Vec<ViewRecord>,
    pub hull: HullMasks,
    /// Per view, the pixels whose ray crosses the canonical box.
    live: Vec<Vec<u32>>,
    live_total: usize,
}

/// Training rays with their supervision.
#[derive(Clone, Debug, Default)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub color: Vec<[f64; 3]>,
    pub mask: Vec<f64>,
    /// Zero where the mask is zero.
    pub depth: Vec<f64>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

impl FitTarget {
    pub fn new(views: Vec<ViewRecord>, heldout: Vec<ViewRecord>, hull: HullMasks) -> Result<Self> {
        let live: Vec<Vec<u32>> = views
            .iter()
            .map(|v| {
                (0..v.num_pixels() as u32)
                    .filter(|&i| {
                        let (o, d) = v.camera.pixel_ray(i as usize / v.width, i as usize % v.width, v.height, v.width);
                        Ray::through_box(o, d).is_some()
                    })
                    .collect()
            })
            .collect();
        let live_total = live.iter().map(Vec::len).sum();
        if live_total == 0 {
            return Err(Error::InvalidScene("no training ray crosses the canonical box".into()));
        }
        Ok(Self { views, heldout, hull, live, live_total })
    }

    /// Renders oracle supervision for `spec` with cameras drawn from `seed`.
    pub fn from_scene(spec: &SceneSpec, plan: &ViewPlan, hull_resolution: usize, dilation: usize, seed: u64) -> Result<Self> {
        let render = |kind: u64, n: usize| -> Result<Vec<ViewRecord>> {
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let cam = CameraPose::sample(&mut stream(seed, &[label::CAMERA, kind, i as u64]));
                    render_oracle_view(spec, &cam, plan.image_size, plan.image_size)
                })
                .collect()
        };
        let views = render(0, plan.train_views)?;
        let heldout = render(1, plan.heldout_views)?;
        Self::new(views, heldout, make_hull_masks(spec, hull_resolution, dilation))
    }

    /// Draws `n` rays uniformly over the live pixels of all views.
    pub fn sample_batch(&self, rng: &mut Rng, n: usize) -> RayBatch {
        let mut b = RayBatch::default();
        for _ in 0..n {
            let mut k = rng.random_range(0..self.live_total);
            let mut vi = 0;
            while k >= self.live[vi].len() {
                k -= self.live[vi].len();
                vi += 1;
            }
            let v = &self.views[vi];
            let p = self.live[vi][k] as usize;
            let (o, d) = v.camera.pixel_ray(p / v.width, p % v.width, v.height, v.width);
            b.rays.push(Ray::through_box(o, d).expect("live pixel"));
            b.color.push([v.rgb[p * 3] as f64, v.rgb[p * 3 + 1] as f64, v.rgb[p * 3 + 2] as f64]);
            let m = v.mask[p] as f64;
            b.mask.push(m);
            b.depth.push(if m > 0.0 { v.depth[p] as f64 } else { 0.0 });
        }
        b
    }
}

/// Loss components of `batch` and gradients of the weighted total.
pub fn batch_loss_and_grad(
    tp: &TriPlane,
    dec: &DecoderParams,
    batch: &RayBatch,
    hull: &HullMasks,
    w: &LossWeights,
    sampling: &SamplingConfig,
) -> Result<(LossComponents, ParamGrads)> {
    let inv = 1.0 / batch.len().max(1) as f64;
    let upstream = |i: usize, o: &RenderOutput| {
        let color = loss::loss_color_grad(&[o.color], &[batch.color[i]], w.l1)[0].map(|g| g * inv);
        let mask = w.mask * loss::loss_mask_grad(&[o.mask], &[batch.mask[i]])[0] * inv;
        let depth = w.depth * loss::loss_depth_grad(&[o.depth], &[batch.depth[i]], &[batch.mask[i]])[0] * inv;
        RayGrad { color, mask, depth }
    };
    let (outs, mut grads) = render_rays_with_grad(tp, dec, &batch.rays, sampling, upstream)?;
    let color: Vec<[f64; 3]> = outs.iter().map(|o| o.color).collect();
    let mask: Vec<f64> = outs.iter().map(|o| o.mask.min(1.0)).collect();
    let depth: Vec<f64> = outs.iter().map(|o| o.depth).collect();
    let (l2, tv) = loss::loss_reg(tp);
    let comps = LossComponents {
        color: loss::loss_color(&color, &batch.color, w.l1)?,
        mask: loss::loss_mask(&mask, &batch.mask)?,
        depth: loss::loss_depth(&depth, &batch.depth, &batch.mask)?,
        l2,
        tv,
        hull: loss::loss_hull(tp, hull)?,
    };
    loss::loss_reg_grad(tp, w.l2, w.tv, &mut grads.triplane);
    loss::loss_hull_grad(tp, hull, w.hull, &mut grads.triplane)?;
    Ok((comps, grads))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub losses: Vec<LossComponents>,
    pub totals: Vec<f64>,
    pub heldout: ViewMetrics,
    /// Fraction of values already inside `[−1, 1]` before finalization.
    pub inside_fraction: f64,
    pub wall_time_s: f64,
}

/// Equality ignores wall time.
impl PartialEq for FitReport {
    fn eq(&self, other: &Self) -> bool {
        self.losses == other.losses
            && self.totals == other.totals
            && self.heldout == other.heldout
            && self.inside_fraction == other.inside_fraction
    }
}

/// Clips or rescales into `[−1, 1]`, then rounds to `f32`. Returns the
/// fraction of values that were already inside.
pub fn finalize_triplane(tp: &mut TriPlane, mode: Finalize) -> f64 {
    let inside = tp.values().filter(|v| v.abs() <= 1.0).count() as f64 / tp.len().max(1) as f64;
    match mode {
        Finalize::Clamp => {
            tp.clamp(-1.0, 1.0);
        }
        Finalize::Affine => {
            let m = tp.max_abs();
            if m > 1.0 {
                tp.values_mut().for_each(|v| *v /= m);
            }
        }
    }
    tp.quantize_f32();
    inside
}

/// Averages PSNR, mask IoU and depth MAE over `views` rendered at midpoints.
pub fn evaluate_views(tp: &TriPlane, dec: &DecoderParams, views: &[ViewRecord], n_samples: usize) -> Result<ViewMetrics> {
    let mut acc = ViewMetrics::default();
    if views.is_empty() {
        return Ok(acc);
    }
    for v in views {
        let r = render_view(tp, dec, &v.camera, v.height, v.width, &SamplingConfig::eval(n_samples))?;
        let target: Vec<f64> = v.rgb.iter().map(|&x| x as f64).collect();
        let rgb: Vec<f64> = r.rgb.iter().map(|x| x.clamp(0.0, 1.0)).collect();
        acc.psnr += psnr(&rgb, &target)?;
        acc.iou += mask_iou(&r.mask, &v.mask)?;
        acc.depth_mae += depth_mae(&r.depth, &v.depth, &v.mask)?;
    }
    let n = views.len() as f64;
    Ok(ViewMetrics { psnr: acc.psnr / n, iou: acc.iou / n, depth_mae: acc.depth_mae / n })
}

fn check_step(phase: &'static str, step: usize, total: f64, grads: &ParamGrads) -> Result<()> {
    if !total.is_finite() || !grads.is_finite() {
        return Err(Error::Divergence { phase, step, loss: total });
    }
    Ok(())
}

fn step_sampling(cfg: &FitConfig, stream_id: u64, step: usize) -> SamplingConfig {
    SamplingConfig::train(cfg.n_samples, derive(cfg.seed, &[label::JITTER, stream_id, step as u64]))
}

/// Fits one triplane against a frozen decoder.
pub fn fit_object(target: &FitTarget, dec: &DecoderParams, cfg: &FitConfig) -> Result<(TriPlane, FitReport)> {
    cfg.validate()?;
    if dec.feature_len() != 3 * cfg.channels {
        return Err(Error::shape("decoder input width", 3 * cfg.channels, dec.feature_len()));
    }
    let start = Instant::now();
    let mut rng = stream(cfg.seed, &[label::FIT]);
    let mut tp = TriPlane::random_normal(cfg.resolution, cfg.channels, cfg.init_std, &mut rng);
    let mut opt = Adam::new(tp.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut totals = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = target.sample_batch(&mut rng, cfg.rays_per_step);
        let (comps, grads) = batch_loss_and_grad(&tp, dec, &batch, &target.hull, &cfg.weights, &step_sampling(cfg, 0, step))?;
        let total = comps.total(&cfg.weights);
        check_step("triplane fitting", step, total, &grads)?;
        opt.step(tp.values_mut(), &grads.triplane, cfg.lr_at(step));
        losses.push(comps);
        totals.push(total);
    }
    let inside_fraction = finalize_triplane(&mut tp, cfg.finalize);
    let heldout = evaluate_views(&tp, dec, &target.heldout, cfg.n_samples)?;
    let report = FitReport { losses, totals, heldout, inside_fraction, wall_time_s: start.elapsed().as_secs_f64() };
    Ok((tp, report))
}

/// Loss history of shared decoder training: mean total over objects per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedReport {
    pub totals: Vec<f64>,
}

/// Jointly optimizes a fresh decoder and one triplane per target. Each step
/// spreads `rays_per_step` evenly over the objects and minimizes the mean of
/// their objectives.
pub fn train_shared_decoder(targets: &[FitTarget], cfg: &FitConfig) -> Result<(DecoderParams, Vec<TriPlane>, SharedReport)> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::OutOfRange { what: "decoder training subset", detail: "empty".into() });
    }
    let k = targets.len();
    let mut dec = DecoderParams::init(3 * cfg.channels, &mut stream(cfg.seed, &[label::DECODER]));
    let mut tps: Vec<TriPlane> = (0..k)
        .map(|i| {
            TriPlane::random_normal(cfg.resolution, cfg.channels, cfg.init_std, &mut stream(cfg.seed, &[label::FIT, i as u64]))
        })
        .collect();
    let mut rngs: Vec<Rng> = (0..k).map(|i| stream(cfg.seed, &[label::FIT, i as u64, 1])).collect();
    let mut dec_opt = Adam::new(dec.len());
    let mut tp_opts: Vec<Adam> = (0..k).map(|_| Adam::new(tps[0].len())).collect();
    let per_object = cfg.rays_per_step.div_ceil(k);
    let mut totals = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batches: Vec<RayBatch> = rngs.iter_mut().zip(targets).map(|(r, t)| t.sample_batch(r, per_object)).collect();
        let results: Vec<Result<(LossComponents, ParamGrads)>> = (0..k)
            .into_par_iter()
            .map(|i| {
                let sampling = step_sampling(cfg, 1 + i as u64, step);
                batch_loss_and_grad(&tps[i], &dec, &batches[i], &targets[i].hull, &cfg.weights, &sampling)
            })
            .collect();
        let mut dec_grad = vec![0.0; dec.len()];
        let mut mean_total = 0.0;
        let lr = cfg.lr_at(step);
        for (i, r) in results.into_iter().enumerate() {
            let (comps, mut grads) = r?;
            let total = comps.total(&cfg.weights);
            check_step("shared decoder training", step, total, &grads)?;
            mean_total += total / k as f64;
            dec_grad.iter_mut().zip(&grads.decoder).for_each(|(a, b)| *a += b / k as f64);
            grads.triplane.iter_mut().for_each(|g| *g /= k as f64);
            tp_opts[i].step(tps[i].values_mut(), &grads.triplane, lr);
        }
        dec_opt.step(dec.params_mut().iter_mut(), &dec_grad, cfg.decoder_lr);
        totals.push(mean_total);
    }
    dec.quantize_f32();
    Ok((dec, tps, SharedReport { totals }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Caption, HullMasks};

    fn small_target(caption: &str, seed: u64) -> FitTarget {
        let spec = SceneSpec::canonical(&caption.parse::<Caption>().unwrap());
        FitTarget::from_scene(&spec, &ViewPlan { train_views: 6, heldout_views: 1, image_size: 24 }, 8, 1, seed).unwrap()
    }

    #[test]
    fn total_loss_gradient_matches_central_differences() {
        let target = small_target("red sphere", 1);
        let mut rng = stream(21, &[]);
        let tp = TriPlane::random_normal(8, 6, 0.6, &mut rng);
        let dec = DecoderParams::init(18, &mut rng);
        let batch = target.sample_batch(&mut rng, 24);
        let w = LossWeights::default();
        let hull = &target.hull;
        let sampling = SamplingConfig::train(16, 3);
        let (_, grads) = batch_loss_and_grad(&tp, &dec, &batch, hull, &w, &sampling).unwrap();
        let f = |tp: &TriPlane, dec: &DecoderParams| {
            batch_loss_and_grad(tp, dec, &batch, hull, &w, &sampling).unwrap().0.total(&w)
        };
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        let h = 1e-6;
        for _ in 0..50 {
            let i = rng.random_range(0..tp.len());
            let (mut p, mut m) = (tp.clone(), tp.clone());
            p.set_flat(i, tp.get_flat(i) + h);
            m.set_flat(i, tp.get_flat(i) - h);
            let fd = (f(&p, &dec) - f(&m, &dec)) / (2.0 * h);
            assert!(rel(fd, grads.triplane[i]) < 1e-4, "texel {i}: {fd} vs {}", grads.triplane[i]);
        }
        for _ in 0..20 {
            let i = rng.random_range(0..dec.len());
            let (mut p, mut m) = (dec.clone(), dec.clone());
            p.params_mut()[i] += h;
            m.params_mut()[i] -= h;
            let fd = (f(&tp, &p) - f(&tp, &m)) / (2.0 * h);
            assert!(rel(fd, grads.decoder[i]) < 1e-4, "param {i}: {fd} vs {}", grads.decoder[i]);
        }
    }

    #[test]
    fn finalize_modes() {
        let mut tp = TriPlane::zeros(2, 1);
        tp.set_flat(0, 2.0);
        tp.set_flat(1, -0.5);
        let mut a = tp.clone();
        let inside = finalize_triplane(&mut a, Finalize::Clamp);
        assert!((inside - 11.0 / 12.0).abs() < 1e-12);
        assert_eq!((a.get_flat(0), a.get_flat(1)), (1.0, -0.5));
        let mut b = tp.clone();
        finalize_triplane(&mut b, Finalize::Affine);
        assert_eq!((b.get_flat(0), b.get_flat(1)), (1.0, -0.25));
    }

    #[test]
    fn fitting_is_deterministic_and_leaves_decoder_alone() {
        let target = small_target("blue cube", 2);
        let dec = DecoderParams::init(18, &mut stream(5, &[]));
        let before = dec.clone();
        let cfg = FitConfig { steps: 12, rays_per_step: 64, n_samples: 16, resolution: 8, seed: 9, ..FitConfig::default() };
        let (a, ra) = fit_object(&target, &dec, &cfg).unwrap();
        let (b, rb) = fit_object(&target, &dec, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.totals.len(), 12);
        assert!(ra.losses.iter().all(|c| [c.color, c.mask, c.depth, c.l2, c.tv, c.hull].iter().all(|&v| v >= 0.0)));
        assert_eq!(dec.params(), before.params());
        assert!(a.values().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn shared_training_is_deterministic() {
        let targets = vec![small_target("red sphere", 3), small_target("green torus", 4)];
        let cfg = FitConfig { steps: 5, rays_per_step: 64, n_samples: 8, resolution: 8, seed: 1, ..FitConfig::default() };
        let (d1, t1, r1) = train_shared_decoder(&targets, &cfg).unwrap();
        let (d2, t2, r2) = train_shared_decoder(&targets, &cfg).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(t1, t2);
        assert_eq!(r1, r2);
        assert!(train_shared_decoder(&[], &cfg).is_err());
        let _ = HullMasks::full(2);
    }
}
