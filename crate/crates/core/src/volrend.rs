//! Differentiable volume rendering of color, mask and expected depth.
//!
//! For `N` samples at distances `t_i` with uniform spacing `δ` along a ray
//! clipped to the canonical box:
//!
//! ```text
//! α_i = 1 − exp(−δ σ_i)        T_i = exp(−δ Σ_{j<i} σ_j)        w_i = T_i α_i
//! color = Σ w_i c_i            mask = Σ w_i                       depth = Σ w_i t_i
//! ```
//!
//! The background is black and depth is not normalized by the mask.
//!
//! Gradients are hand-derived. With `q_i = ∂L/∂w_i = g_C·c_i + g_M + g_D t_i`,
//!
//! ```text
//! ∂L/∂σ_i = δ (T_{i+1} q_i − Σ_{k>i} w_k q_k)        ∂L/∂c_i = w_i g_C
//! ```
//!
//! and the rest flows through the decoder heads, the MLP and the bilinear
//! footprints into the triplane texels.

use glam::DVec3;
use rayon::prelude::*;

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::rng::derive;
use crate::scene::{slab, BOX_HALF};
use crate::triplane::{decoder_heads, DecoderParams, Footprint, MlpCache, TriPlane};

/// Default samples per ray.
pub const DEFAULT_SAMPLES: usize = 64;
/// Rays per parallel work unit; fixed so reductions never depend on thread count.
const CHUNK_RAYS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: DVec3,
    pub direction: DVec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Clips a ray against the canonical box; `None` when the interval is empty.
    pub fn through_box(origin: DVec3, direction: DVec3) -> Option<Ray> {
        let direction = direction.normalize();
        let (t0, t1) = slab(origin, direction, DVec3::splat(BOX_HALF))?;
        let t_near = t0.max(0.0);
        (t1 > t_near).then_some(Ray { origin, direction, t_near, t_far: t1 })
    }

    pub fn at(&self, t: f64) -> DVec3 {
        self.origin + self.direction * t
    }
}

/// One ray per requested `(row, col)` pixel; `None` where the ray misses the box.
pub fn make_rays(camera: &CameraPose, height: usize, width: usize, pixels: &[(usize, usize)]) -> Result<Vec<Option<Ray>>> {
    camera.validate()?;
    Ok(pixels
        .iter()
        .map(|&(r, c)| {
            let (o, d) = camera.pixel_ray(r, c, height, width);
            Ray::through_box(o, d)
        })
        .collect())
}

/// All pixels of an image in row-major order.
pub fn all_pixels(height: usize, width: usize) -> Vec<(usize, usize)> {
    (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub n_samples: usize,
    /// Uniform jitter inside each of the `N` bins; midpoints otherwise.
    pub stratified: bool,
    /// Seed of the jitter stream; the ray's batch index selects its sub-stream.
    pub seed: u64,
}

impl SamplingConfig {
    pub fn eval(n_samples: usize) -> Self {
        Self { n_samples, stratified: false, seed: 0 }
    }

    pub fn train(n_samples: usize, seed: u64) -> Self {
        Self { n_samples, stratified: true, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::OutOfRange { what: "samples per ray", detail: format!("{} < 2", self.n_samples) });
        }
        Ok(())
    }
}

fn unit_hash(seed: u64, ray: u64, i: u64) -> f64 {
    (derive(seed, &[ray, i]) >> 11) as f64 / (1u64 << 53) as f64
}

/// Sample distances and the uniform spacing `δ`.
pub fn sample_distances(ray: &Ray, cfg: &SamplingConfig, ray_index: u64) -> (Vec<f64>, f64) {
    let n = cfg.n_samples;
    let delta = (ray.t_far - ray.t_near) / n as f64;
    let ts = (0..n)
        .map(|i| {
            let u = if cfg.stratified { unit_hash(cfg.seed, ray_index, i as u64) } else { 0.5 };
            ray.t_near + (i as f64 + u) * delta
        })
        .collect();
    (ts, delta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub mask: f64,
    pub depth: f64,
    pub weights: Vec<f64>,
}

impl RenderOutput {
    fn empty() -> Self {
        Self { color: [0.0; 3], mask: 0.0, depth: 0.0, weights: Vec::new() }
    }
}

/// Upstream gradient of one ray's outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayGrad {
    pub color: [f64; 3],
    pub mask: f64,
    pub depth: f64,
}

/// Gradients with respect to every triplane value (flat `xy, xz, yz` order)
/// and every decoder parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub triplane: Vec<f64>,
    pub decoder: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(tp: &TriPlane, dec: &DecoderParams) -> Self {
        Self { triplane: vec![0.0; tp.len()], decoder: vec![0.0; dec.len()] }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        self.triplane.iter_mut().zip(&other.triplane).for_each(|(a, b)| *a += b);
        self.decoder.iter_mut().zip(&other.decoder).for_each(|(a, b)| *a += b);
    }

    pub fn is_finite(&self) -> bool {
        self.triplane.iter().chain(&self.decoder).all(|v| v.is_finite())
    }
}

/// Alpha compositing of samples with spacing `delta`. Returns the outputs and
/// the transmittance `T_1..T_{N+1}`, or the index of the first non-finite density.
pub fn composite(ts: &[f64], delta: f64, sigmas: &[f64], colors: &[[f64; 3]]) -> std::result::Result<(RenderOutput, Vec<f64>), usize> {
    let n = ts.len();
    let mut trans = Vec::with_capacity(n + 1);
    let mut out = RenderOutput::empty();
    out.weights.reserve(n);
    let mut acc = 0.0;
    trans.push(1.0);
    for i in 0..n {
        let sigma = sigmas[i];
        if !sigma.is_finite() {
            return Err(i);
        }
        let w = trans[i] * -(-delta * sigma).exp_m1();
        acc += sigma * delta;
        trans.push((-acc).exp());
        for k in 0..3 {
            out.color[k] += w * colors[i][k];
        }
        out.mask += w;
        out.depth += w * ts[i];
        out.weights.push(w);
    }
    Ok((out, trans))
}

/// Recorded forward pass over a batch of rays.
pub struct RenderTape {
    n_samples: usize,
    rays: Vec<RayRecord>,
    footprints: Vec<[Footprint; 3]>,
    mlp: MlpCache,
}

struct RayRecord {
    ts: Vec<f64>,
    delta: f64,
    /// Transmittance `T_1..T_{N+1}`.
    trans: Vec<f64>,
    weights: Vec<f64>,
}

impl RenderTape {
    /// Forward pass over `rays`; `index_offset` shifts the jitter sub-stream index.
    pub fn record(
        tp: &TriPlane,
        dec: &DecoderParams,
        rays: &[Ray],
        cfg: &SamplingConfig,
        index_offset: u64,
    ) -> Result<(Vec<RenderOutput>, RenderTape)> {
        cfg.validate()?;
        if dec.feature_len() != tp.feature_len() {
            return Err(Error::shape("decoder input width", tp.feature_len(), dec.feature_len()));
        }
        let n = cfg.n_samples;
        let fl = tp.feature_len();
        let total = rays.len() * n;
        let mut feats = vec![0.0; total * fl];
        let mut footprints = Vec::with_capacity(total);
        let mut samples = Vec::with_capacity(rays.len());
        for (r, ray) in rays.iter().enumerate() {
            let (ts, delta) = sample_distances(ray, cfg, index_offset + r as u64);
            for (i, &t) in ts.iter().enumerate() {
                let fps = tp.footprints(ray.at(t));
                let row = (r * n + i) * fl;
                tp.feature_from_footprints(&fps, &mut feats[row..row + fl]);
                if feats[row..row + fl].iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { what: "triplane feature", location: format!("sample {i} of ray {}", index_offset + r as u64) });
                }
                footprints.push(fps);
            }
            samples.push((ts, delta));
        }
        let mlp = dec.forward_batch(feats, total);
        let mut outputs = Vec::with_capacity(rays.len());
        let mut records = Vec::with_capacity(rays.len());
        for (r, (ts, delta)) in samples.into_iter().enumerate() {
            let base = r * n;
            let sigmas: Vec<f64> = (base..base + n).map(|s| mlp.density(s)).collect();
            let colors: Vec<[f64; 3]> = (base..base + n).map(|s| mlp.rgb(s)).collect();
            let (out, trans) = composite(&ts, delta, &sigmas, &colors)
                .map_err(|i| Error::NonFinite { what: "density", location: format!("sample {i} of ray {}", index_offset + r as u64) })?;
            records.push(RayRecord { ts, delta, trans, weights: out.weights.clone() });
            outputs.push(out);
        }
        Ok((outputs, RenderTape { n_samples: n, rays: records, footprints, mlp }))
    }

    /// Reverse pass. Consumes the tape; gradients accumulate into `grads`.
    pub fn backward(self, tp: &TriPlane, dec: &DecoderParams, upstream: &[RayGrad], grads: &mut ParamGrads) {
        assert_eq!(upstream.len(), self.rays.len(), "one upstream gradient per ray");
        let n = self.n_samples;
        let total = self.rays.len() * n;
        let mut d_raw = vec![0.0; total * 4];
        for (r, (rec, g)) in self.rays.iter().zip(upstream).enumerate() {
            if *g == RayGrad::default() {
                continue;
            }
            let q: Vec<f64> = (0..n)
                .map(|i| {
                    let c = self.mlp.rgb(r * n + i);
                    g.color[0] * c[0] + g.color[1] * c[1] + g.color[2] * c[2] + g.mask + g.depth * rec.ts[i]
                })
                .collect();
            let mut suffix = 0.0;
            for i in (0..n).rev() {
                let s = r * n + i;
                let raw = &self.mlp.raw[s * 4..s * 4 + 4];
                let (dc, ds) = decoder_heads(raw);
                let w = rec.weights[i];
                let d_sigma = rec.delta * (rec.trans[i + 1] * q[i] - suffix);
                suffix += w * q[i];
                let out = &mut d_raw[s * 4..s * 4 + 4];
                for k in 0..3 {
                    out[k] = w * g.color[k] * dc[k];
                }
                out[3] = d_sigma * ds;
            }
        }
        let d_feat = dec
            .backward_batch(&self.mlp, d_raw, &mut grads.decoder, true)
            .expect("input gradient requested");
        scatter_features(tp, &self.footprints, &d_feat, &mut grads.triplane);
    }
}

/// Adds feature gradients back onto the texels of each bilinear footprint.
fn scatter_features(tp: &TriPlane, footprints: &[[Footprint; 3]], d_feat: &[f64], out: &mut [f64]) {
    let c = tp.channels();
    let fl = tp.feature_len();
    let stride = tp.resolution() * tp.resolution();
    let plane_len = tp.plane_len();
    for (s, fps) in footprints.iter().enumerate() {
        let df = &d_feat[s * fl..(s + 1) * fl];
        for (k, fp) in fps.iter().enumerate() {
            let base = k * plane_len;
            for ch in 0..c {
                let g = df[k * c + ch];
                if g == 0.0 {
                    continue;
                }
                let cb = base + ch * stride;
                for (&o, &w) in fp.offsets.iter().zip(&fp.weights) {
                    out[cb + o as usize] += g * w;
                }
            }
        }
    }
}

/// Forward-only rendering of a ray batch (parallel, thread-count independent).
pub fn render_rays(tp: &TriPlane, dec: &DecoderParams, rays: &[Ray], cfg: &SamplingConfig) -> Result<Vec<RenderOutput>> {
    let parts: Vec<Result<Vec<RenderOutput>>> = rays
        .par_chunks(CHUNK_RAYS)
        .enumerate()
        .map(|(ci, chunk)| RenderTape::record(tp, dec, chunk, cfg, (ci * CHUNK_RAYS) as u64).map(|(o, _)| o))
        .collect();
    let mut out = Vec::with_capacity(rays.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Forward and backward over a ray batch where each ray's upstream gradient
/// depends only on its own output (per-ray losses). Chunks run in parallel and
/// their gradients are reduced in chunk order.
pub fn render_rays_with_grad<F>(
    tp: &TriPlane,
    dec: &DecoderParams,
    rays: &[Ray],
    cfg: &SamplingConfig,
    upstream: F,
) -> Result<(Vec<RenderOutput>, ParamGrads)>
where
    F: Fn(usize, &RenderOutput) -> RayGrad + Sync,
{
    let parts: Vec<Result<(Vec<RenderOutput>, ParamGrads)>> = rays
        .par_chunks(CHUNK_RAYS)
        .enumerate()
        .map(|(ci, chunk)| {
            let offset = ci * CHUNK_RAYS;
            let (outs, tape) = RenderTape::record(tp, dec, chunk, cfg, offset as u64)?;
            let ups: Vec<RayGrad> = outs.iter().enumerate().map(|(i, o)| upstream(offset + i, o)).collect();
            let mut g = ParamGrads::zeros(tp, dec);
            tape.backward(tp, dec, &ups, &mut g);
            Ok((outs, g))
        })
        .collect();
    let mut outputs = Vec::with_capacity(rays.len());
    let mut grads = ParamGrads::zeros(tp, dec);
    for p in parts {
        let (o, g) = p?;
        outputs.extend(o);
        grads.add(&g);
    }
    Ok((outputs, grads))
}

/// Renders a single ray (forward only).
pub fn render_ray(tp: &TriPlane, dec: &DecoderParams, ray: &Ray, cfg: &SamplingConfig) -> Result<RenderOutput> {
    let (mut out, _) = RenderTape::record(tp, dec, std::slice::from_ref(ray), cfg, 0)?;
    Ok(out.pop().expect("one ray"))
}

/// A rendered image; pixels whose ray misses the box stay black with zero mask and depth.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>,
    pub mask: Vec<f64>,
    pub depth: Vec<f64>,
}

pub fn render_view(
    tp: &TriPlane,
    dec: &DecoderParams,
    camera: &CameraPose,
    height: usize,
    width: usize,
    cfg: &SamplingConfig,
) -> Result<RenderedView> {
    let pixels = all_pixels(height, width);
    let rays = make_rays(camera, height, width, &pixels)?;
    let (idx, live): (Vec<usize>, Vec<Ray>) = rays.iter().enumerate().filter_map(|(i, r)| r.map(|r| (i, r))).unzip();
    let outs = render_rays(tp, dec, &live, cfg).map_err(|e| match e {
        Error::NonFinite { what, location } => {
            // the location names a ray inside the live batch; translate it to a pixel
            let pixel = location
                .rsplit(' ')
                .next()
                .and_then(|r| r.parse::<usize>().ok())
                .and_then(|r| idx.get(r))
                .map(|&i| format!("pixel ({}, {})", i / width, i % width))
                .unwrap_or_default();
            Error::NonFinite { what, location: format!("{location} {pixel}") }
        }
        other => other,
    })?;
    let n = height * width;
    let mut view = RenderedView { height, width, rgb: vec![0.0; n * 3], mask: vec![0.0; n], depth: vec![0.0; n] };
    for (&i, o) in idx.iter().zip(&outs) {
        view.rgb[i * 3..i * 3 + 3].copy_from_slice(&o.color);
        view.mask[i] = o.mask;
        view.depth[i] = o.depth;
    }
    Ok(view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Projection;
    use crate::triplane::DECODER_LAYERS;
    use crate::rng::stream;
    use rand::Rng as _;

    /// Medium with density 2 on `[0.25, 1.25)` of a ray spanning `[0, 1.5]`.
    fn slab_mask(n: usize) -> f64 {
        let (t0, t1) = (0.0, 1.5);
        let delta = (t1 - t0) / n as f64;
        let ts: Vec<f64> = (0..n).map(|i| t0 + (i as f64 + 0.5) * delta).collect();
        let sigmas: Vec<f64> = ts.iter().map(|&t| if (0.25..1.25).contains(&t) { 2.0 } else { 0.0 }).collect();
        composite(&ts, delta, &sigmas, &vec![[1.0; 3]; n]).unwrap().0.mask
    }

    #[test]
    fn constant_slab_transmittance() {
        let exact = 1.0 - (-2.0f64).exp();
        assert!((slab_mask(1000) - exact).abs() < 1e-3);
        let e256 = (slab_mask(256) - exact).abs();
        let e512 = (slab_mask(512) - exact).abs();
        assert!(e256 / e512 >= 1.8, "{e256} / {e512}");
    }

    fn constant_density_decoder(sigma: f64) -> DecoderParams {
        let mut dec = DecoderParams::zeros(18);
        let (_, b) = dec.layer_range(DECODER_LAYERS - 1);
        // inverse softplus
        dec.params_mut()[b.end - 1] = sigma.exp_m1().ln();
        dec
    }

    #[test]
    fn constant_field_through_the_box() {
        let tp = TriPlane::zeros(8, 6);
        let dec = constant_density_decoder(2.0);
        let cam = CameraPose {
            position: DVec3::new(0.0, 0.0, 1.5),
            look_at: DVec3::ZERO,
            up: DVec3::Y,
            projection: Projection::Orthographic { half_extent: 0.6 },
        };
        let ray = make_rays(&cam, 9, 9, &[(4, 4)]).unwrap()[0].unwrap();
        assert!((ray.origin - DVec3::new(0.0, 0.0, 1.5)).length() < 1e-12);
        assert!((ray.direction - DVec3::NEG_Z).length() < 1e-12);
        assert!((ray.t_near - 1.0).abs() < 1e-12 && (ray.t_far - 2.0).abs() < 1e-12);
        let out = render_ray(&tp, &dec, &ray, &SamplingConfig::eval(1000)).unwrap();
        assert!((out.mask - (1.0 - (-2.0f64).exp())).abs() < 1e-12);
        assert!(out.color.iter().all(|&c| (c - 0.5 * out.mask).abs() < 1e-12));
    }

    #[test]
    fn narrow_camera_corner_misses_box() {
        let cam = CameraPose::orbit(0.0, 0.0, 10.0, Projection::Perspective { fov_y: 0.2 });
        let rays = make_rays(&cam, 32, 32, &[(0, 0), (16, 16)]).unwrap();
        assert!(rays[0].is_none());
        assert!(rays[1].is_some());
    }

    #[test]
    fn opaque_wall_limit() {
        let n = 500;
        let delta = 1.0 / n as f64;
        let ts: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * delta).collect();
        let sigmas: Vec<f64> = ts.iter().map(|&t| if t < 0.7 { 0.0 } else { 1e4 }).collect();
        let c = [0.2, 0.6, 0.9];
        let (out, _) = composite(&ts, delta, &sigmas, &vec![c; n]).unwrap();
        assert!((out.depth - 0.7).abs() <= delta);
        for k in 0..3 {
            assert!((out.color[k] - c[k] * out.mask).abs() < 1e-12);
        }
        assert!((out.mask - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_sum_identity_and_nonfinite_density() {
        let mut rng = stream(3, &[]);
        for _ in 0..200 {
            let n = rng.random_range(2..300);
            let delta = rng.random_range(0.001..0.05);
            let ts: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * delta).collect();
            let sigmas: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..80.0)).collect();
            let (out, trans) = composite(&ts, delta, &sigmas, &vec![[0.0; 3]; n]).unwrap();
            let sum: f64 = out.weights.iter().sum();
            let closed = 1.0 - (-delta * sigmas.iter().sum::<f64>()).exp();
            assert!((sum - out.mask).abs() < 1e-12);
            assert!((out.mask - closed).abs() < 1e-12);
            assert!((trans[n] - (1.0 - out.mask)).abs() < 1e-12);
        }
        let err = composite(&[0.1, 0.2, 0.3], 0.1, &[1.0, f64::NAN, 1.0], &[[0.0; 3]; 3]);
        assert_eq!(err.unwrap_err(), 1);
    }

    fn random_setup(seed: u64) -> (TriPlane, DecoderParams, Vec<Ray>) {
        let mut rng = stream(seed, &[]);
        let tp = TriPlane::random_normal(8, 6, 0.8, &mut rng);
        let dec = DecoderParams::init(18, &mut rng);
        let rays = (0..20)
            .map(|_| {
                let cam = CameraPose::sample(&mut rng);
                let (o, d) = cam.pixel_ray(rng.random_range(8..24), rng.random_range(8..24), 32, 32);
                Ray::through_box(o, d).unwrap()
            })
            .collect();
        (tp, dec, rays)
    }

    #[test]
    fn mask_gradient_matches_central_differences() {
        let (tp, dec, rays) = random_setup(11);
        let cfg = SamplingConfig::train(64, 5);
        let up = vec![RayGrad { color: [0.3, -0.2, 0.5], mask: 1.0, depth: 0.4 }; rays.len()];
        let loss = |tp: &TriPlane, dec: &DecoderParams| -> f64 {
            let outs = render_rays(tp, dec, &rays, &cfg).unwrap();
            outs.iter()
                .zip(&up)
                .map(|(o, g)| (0..3).map(|k| o.color[k] * g.color[k]).sum::<f64>() + o.mask * g.mask + o.depth * g.depth)
                .sum()
        };
        let (_, tape) = RenderTape::record(&tp, &dec, &rays, &cfg, 0).unwrap();
        let mut grads = ParamGrads::zeros(&tp, &dec);
        tape.backward(&tp, &dec, &up, &mut grads);
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        let h = 1e-6;
        let mut touched: Vec<usize> = (0..tp.len()).filter(|&i| grads.triplane[i] != 0.0).collect();
        touched.truncate(60);
        assert!(touched.len() >= 20);
        for &i in &touched {
            let (mut p, mut m) = (tp.clone(), tp.clone());
            p.set_flat(i, tp.get_flat(i) + h);
            m.set_flat(i, tp.get_flat(i) - h);
            let fd = (loss(&p, &dec) - loss(&m, &dec)) / (2.0 * h);
            assert!(rel(fd, grads.triplane[i]) < 1e-4, "texel {i}: {fd} vs {}", grads.triplane[i]);
        }
        for i in (0..dec.len()).step_by(53) {
            let (mut p, mut m) = (dec.clone(), dec.clone());
            p.params_mut()[i] += h;
            m.params_mut()[i] -= h;
            let fd = (loss(&tp, &p) - loss(&tp, &m)) / (2.0 * h);
            assert!(rel(fd, grads.decoder[i]) < 1e-4, "param {i}: {fd} vs {}", grads.decoder[i]);
        }
    }

    #[test]
    fn zero_upstream_and_untouched_texels() {
        let (tp, dec, rays) = random_setup(12);
        let cfg = SamplingConfig::train(32, 1);
        let (_, g0) = render_rays_with_grad(&tp, &dec, &rays, &cfg, |_, _| RayGrad::default()).unwrap();
        assert!(g0.triplane.iter().chain(&g0.decoder).all(|&v| v == 0.0));

        // rays confined to x, y > 0.1 can never reach texels of low x or y on the xy plane
        let ray = Ray { origin: DVec3::new(0.3, 0.3, 1.0), direction: DVec3::NEG_Z, t_near: 0.5, t_far: 1.5 };
        let (_, g) = render_rays_with_grad(&tp, &dec, &[ray], &cfg, |_, _| RayGrad { mask: 1.0, ..Default::default() }).unwrap();
        let res = tp.resolution();
        let xy = &g.triplane[..tp.plane_len()];
        for ch in 0..tp.channels() {
            for row in 0..res / 2 {
                for col in 0..res / 2 {
                    assert_eq!(xy[ch * res * res + row * res + col], 0.0);
                }
            }
        }
        assert!(xy.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn chunked_gradients_are_deterministic() {
        let (tp, dec, rays) = random_setup(13);
        let many: Vec<Ray> = rays.iter().cycle().take(700).copied().collect();
        let cfg = SamplingConfig::train(16, 2);
        let up = |i: usize, _: &RenderOutput| RayGrad { mask: (i % 7) as f64 - 3.0, ..Default::default() };
        let a = render_rays_with_grad(&tp, &dec, &many, &cfg, up).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| render_rays_with_grad(&tp, &dec, &many, &cfg, up)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn view_reports_pixel_of_nonfinite_density() {
        let tp = TriPlane::filled(4, 6, f64::NAN);
        let dec = DecoderParams::zeros(18);
        let cam = CameraPose::orbit(0.0, 0.0, 1.5, Projection::Perspective { fov_y: 0.8 });
        let err = render_view(&tp, &dec, &cam, 4, 4, &SamplingConfig::eval(8)).unwrap_err();
        assert!(err.to_string().contains("pixel ("), "{err}");
    }
}
