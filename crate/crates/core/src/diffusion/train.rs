//! Corpora and the mixed 2D/3D training loop.

use autograd::{Adam, Grads, Graph, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{BatchKind, Denoiser, Routing, GROUP_PLANE, GROUP_REST};
use super::schedule::{loss_weight, NoiseSchedule, DEFAULT_T, MIN_SNR_GAMMA};
use super::tokens::CaptionTokens;
use crate::error::{Error, Result};
use crate::rng::{label, stream};
use crate::scene::{Caption, ViewRecord};
use crate::triplane::{TriPlane, PSEUDO_IMAGES};

/// One triplane as six stacked `3×R×R` pseudo-images.
#[derive(Clone, Debug, PartialEq)]
pub struct TriplaneExample {
    pub images: Vec<f32>,
    pub caption: Caption,
}

impl TriplaneExample {
    pub fn new(tp: &TriPlane, caption: Caption) -> Result<Self> {
        let images = tp.pack()?.to_flat().into_iter().map(|v| v as f32).collect();
        Ok(Self { images, caption })
    }
}

/// One `3×R×R` image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageExample {
    pub image: Vec<f32>,
    pub caption: Caption,
}

impl ImageExample {
    /// Converts an interleaved RGB view in `[0, 1]` to a planar image in `[-1, 1]`.
    pub fn from_view(view: &ViewRecord, caption: Caption) -> Self {
        Self { image: rgb_to_planar(&view.rgb, view.height * view.width), caption }
    }
}

/// Interleaved `[0, 1]` RGB to planar `[-1, 1]`.
pub fn rgb_to_planar(rgb: &[f32], pixels: usize) -> Vec<f32> {
    let mut out = vec![0.0; 3 * pixels];
    for i in 0..pixels {
        for k in 0..3 {
            out[k * pixels + i] = 2.0 * rgb[i * 3 + k] - 1.0;
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub resolution: usize,
    pub triplanes: Vec<TriplaneExample>,
    pub images: Vec<ImageExample>,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        let img = 3 * self.resolution * self.resolution;
        if self.triplanes.is_empty() {
            return Err(Error::Config("diffusion corpus has no triplanes".into()));
        }
        if let Some(t) = self.triplanes.iter().find(|t| t.images.len() != PSEUDO_IMAGES * img) {
            return Err(Error::shape("corpus triplane", PSEUDO_IMAGES * img, t.images.len()));
        }
        if let Some(t) = self.images.iter().find(|t| t.image.len() != img) {
            return Err(Error::shape("corpus image", img, t.image.len()));
        }
        let out_of_range = self.triplanes.iter().flat_map(|t| &t.images).chain(self.images.iter().flat_map(|t| &t.image));
        if let Some(v) = out_of_range.into_iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange { what: "corpus value", detail: format!("{v} outside [-1, 1]") });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Triplanes per 3D batch; 2D batches hold six times as many images.
    pub batch_items: usize,
    pub p_2d: f64,
    pub null_prob: f64,
    pub lr_plane: f32,
    pub lr_rest: f32,
    pub t_max: usize,
    pub min_snr_gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20000,
            batch_items: 4,
            p_2d: 0.5,
            null_prob: 0.05,
            lr_plane: 1e-3,
            lr_rest: 1e-4,
            t_max: DEFAULT_T,
            min_snr_gamma: MIN_SNR_GAMMA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::OutOfRange { what: "diffusion training configuration", detail });
        if self.batch_items == 0 {
            return bad("batch_items must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_2d) || !(0.0..=1.0).contains(&self.null_prob) {
            return bad(format!("probabilities p_2d {} null_prob {}", self.p_2d, self.null_prob));
        }
        if !(self.lr_plane >= 0.0 && self.lr_rest >= 0.0 && self.min_snr_gamma > 0.0) {
            return bad("learning rates must be non-negative and gamma positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// `true` where the step drew a 2D batch.
    pub image_steps: Vec<bool>,
}

/// One sequence of images sharing an attention group, with its noise draws.
struct Item {
    x0: Vec<f32>,
    eps: Vec<f32>,
    t: usize,
    caption: CaptionTokens,
}

/// Trains `model` in place.
pub fn train(model: &mut Denoiser, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    corpus.validate()?;
    if corpus.resolution != model.config.resolution {
        return Err(Error::shape("corpus resolution", model.config.resolution, corpus.resolution));
    }
    if cfg.p_2d > 0.0 && corpus.images.is_empty() {
        return Err(Error::Config("p_2d > 0 needs a non-empty image corpus".into()));
    }
    let schedule = NoiseSchedule::new(cfg.t_max)?;
    let mut lrs = vec![0.0; 2];
    lrs[GROUP_PLANE] = cfg.lr_plane;
    lrs[GROUP_REST] = cfg.lr_rest;
    let mut adam = Adam::new(&model.params, lrs);
    let mut report = TrainReport::default();

    for step in 0..cfg.steps {
        let mut rng = stream(cfg.seed, &[label::DIFFUSION, step as u64]);
        let two_d = cfg.p_2d > 0.0 && rng.random_bool(cfg.p_2d);
        let (kind, items) = draw_batch(&mut rng, corpus, cfg, &schedule, two_d);
        let (loss, grads) = batch_loss_and_grad(model, &schedule, &items, kind, cfg.min_snr_gamma)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence { phase: "diffusion training", step, loss });
        }
        adam.step(&mut model.params, &grads, 1.0);
        report.losses.push(loss);
        report.image_steps.push(two_d);
    }
    Ok(report)
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn draw_batch(rng: &mut impl Rng, corpus: &Corpus, cfg: &TrainConfig, s: &NoiseSchedule, two_d: bool) -> (BatchKind, Vec<Item>) {
    let caption = |rng: &mut dyn rand::RngCore, c: &Caption| {
        if rng.random_bool(cfg.null_prob) {
            CaptionTokens::null()
        } else {
            CaptionTokens::encode(c)
        }
    };
    if two_d {
        let items = (0..cfg.batch_items * PSEUDO_IMAGES)
            .map(|_| {
                let ex = &corpus.images[rng.random_range(0..corpus.images.len())];
                let t = rng.random_range(1..=s.t_max());
                let caption = caption(rng, &ex.caption);
                Item { eps: normal_vec(rng, ex.image.len()), x0: ex.image.clone(), t, caption }
            })
            .collect();
        (BatchKind::Image2D, items)
    } else {
        let items = (0..cfg.batch_items)
            .map(|_| {
                let ex = &corpus.triplanes[rng.random_range(0..corpus.triplanes.len())];
                let t = rng.random_range(1..=s.t_max());
                let caption = caption(rng, &ex.caption);
                Item { eps: normal_vec(rng, ex.images.len()), x0: ex.images.clone(), t, caption }
            })
            .collect();
        (BatchKind::Triplane, items)
    }
}

/// Min-SNR weighted v-MSE averaged over every element of the batch.
/// Items are processed independently and reduced in order, so the result does
/// not depend on the number of threads.
fn batch_loss_and_grad(model: &Denoiser, s: &NoiseSchedule, items: &[Item], kind: BatchKind, gamma: f64) -> Result<(f64, Grads)> {
    let total: usize = items.iter().map(|it| it.x0.len()).sum();
    let routing = Routing::from(kind);
    let per_image = 3 * model.config.resolution * model.config.resolution;
    let parts: Vec<Result<(f64, Grads)>> = items
        .par_iter()
        .map(|it| {
            let (a, g) = (s.alpha(it.t), s.sigma(it.t));
            let z: Vec<f32> = it.x0.iter().zip(&it.eps).map(|(&x, &e)| (a * x as f64 + g * e as f64) as f32).collect();
            let v: Vec<f64> = it.x0.iter().zip(&it.eps).map(|(&x, &e)| a * e as f64 - g * x as f64).collect();
            let n = it.x0.len() / per_image;
            let mut graph = Graph::new(&model.params);
            let zv = graph.input(Tensor::new(&[n, 3, model.config.resolution, model.config.resolution], z));
            let out = model.forward(&mut graph, zv, &vec![it.t; n], &[it.caption], routing)?;
            let w = loss_weight(it.t, s, gamma);
            let pred = graph.value(out).data();
            let mut loss = 0.0;
            let mut seed = vec![0.0f32; pred.len()];
            for ((&p, &v), sd) in pred.iter().zip(&v).zip(&mut seed) {
                let r = p as f64 - v;
                loss += w * r * r;
                *sd = (2.0 * w * r / total as f64) as f32;
            }
            let grads = graph.backward(out, Tensor::new(graph.shape(out), seed)).params;
            Ok((loss / total as f64, grads))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = Grads::zeros_like(&model.params);
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.merge(&g);
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::DenoiserConfig;

    pub(crate) fn toy_corpus(res: usize, n: usize, seed: u64) -> Corpus {
        let mut rng = stream(seed, &[]);
        let captions = Caption::enumerate();
        let img = 3 * res * res;
        let triplanes = (0..n)
            .map(|i| TriplaneExample {
                images: (0..PSEUDO_IMAGES * img).map(|_| rng.random_range(-0.5..0.5)).collect(),
                caption: captions[i % 4].clone(),
            })
            .collect();
        let images = (0..n)
            .map(|i| ImageExample { image: (0..img).map(|_| rng.random_range(-1.0..1.0)).collect(), caption: captions[i % 4].clone() })
            .collect();
        Corpus { resolution: res, triplanes, images }
    }

    fn tiny() -> DenoiserConfig {
        DenoiserConfig { resolution: 8, widths: [8, 8, 16], groups: 4, heads: 2, temb_dim: 16, token_dim: 8 }
    }

    #[test]
    fn training_is_deterministic_and_thread_independent() {
        let corpus = toy_corpus(8, 6, 1);
        let cfg = TrainConfig { steps: 4, batch_items: 2, seed: 5, ..TrainConfig::default() };
        let run = || {
            let mut m = Denoiser::new(tiny(), &mut stream(3, &[])).unwrap();
            let r = train(&mut m, &corpus, &cfg).unwrap();
            (m.params, r)
        };
        let a = run();
        let b = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(a.1.losses.iter().all(|l| l.is_finite() && *l > 0.0));
    }

    #[test]
    fn plane_embeddings_move_only_on_triplane_steps() {
        let corpus = toy_corpus(8, 3, 2);
        let mut m = Denoiser::new(tiny(), &mut stream(4, &[])).unwrap();
        let pe = m.params.find("plane_emb").unwrap();
        let before = m.params.value(pe).clone();
        let cfg = TrainConfig { steps: 2, batch_items: 1, p_2d: 1.0, ..TrainConfig::default() };
        let r = train(&mut m, &corpus, &cfg).unwrap();
        assert!(r.image_steps.iter().all(|&b| b));
        assert_eq!(m.params.value(pe), &before);
        let cfg = TrainConfig { p_2d: 0.0, ..cfg };
        train(&mut m, &corpus, &cfg).unwrap();
        assert_ne!(m.params.value(pe), &before);
    }

    #[test]
    fn corpus_checks() {
        let mut c = toy_corpus(8, 2, 3);
        assert!(c.validate().is_ok());
        c.images[0].image[0] = 1.5;
        assert!(c.validate().is_err());
        let mut m = Denoiser::new(tiny(), &mut stream(4, &[])).unwrap();
        let c = Corpus { resolution: 8, ..Corpus::default() };
        assert!(train(&mut m, &c, &TrainConfig::default()).is_err());
    }

    #[test]
    fn rgb_conversion() {
        let planar = rgb_to_planar(&[0.0, 0.5, 1.0, 1.0, 1.0, 1.0], 2);
        assert_eq!(planar, vec![-1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
