//! The ten acceptance criteria. Each test prints one PASS/FAIL line (written
//! straight to stderr so it shows without `--nocapture`) and then asserts.
//!
//! Criteria that train models run at a reduced desk scale so the suite fits
//! a single CPU core; the reductions are listed next to each fixture. Set
//! `TPDIFF_ACCEPTANCE_CACHE=1` to keep trained fixtures under the cargo
//! target directory between runs.

mod common;

use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::Rng as _;
use tpdiff::camera::CameraPose;
use tpdiff::diffusion::schedule::{eps_from_v, x0_from_v};
use tpdiff::diffusion::{
    add_noise, cfg_combine, sample, sample_many, train, v_target, CaptionTokens, Corpus, Denoiser, DenoiserConfig, ImageExample, NoiseSchedule, Routing,
    SampleConfig, TrainConfig, TriplaneExample,
};
use tpdiff::fitting::{batch_loss_and_grad, evaluate_views, fit_object, train_shared_decoder, FitConfig, FitTarget, LossWeights, ViewPlan};
use tpdiff::refine::{refine, RefineConfig, ViewRays};
use tpdiff::rng::stream;
use tpdiff::scene::{random_caption, render_oracle_view, Caption, PaletteColor, SceneSpec, ShapeKind, Sizing};
use tpdiff::triplane::{DecoderParams, PseudoImageStack, TriPlane};
use tpdiff::volrend::{composite, SamplingConfig};
use tpdiff::workbench::io::{
    decoder_checkpoint, decoder_from_checkpoint, denoiser_checkpoint, denoiser_from_checkpoint, save_triplane, Checkpoint, IndexEntry, TriplaneIndex,
};
use tpdiff::workbench::retrieval::{OracleIndex, Retrieval, RetrievalStats};

/// Criteria run one at a time so wall-clock checks are not skewed by each other.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report_line(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n:2} [{name}]: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Wall-clock budgets are stated for an 8-core machine; scale them to the cores present.
fn scaled_budget(seconds_on_8: f64) -> f64 {
    seconds_on_8 * 8.0 / cores().min(8) as f64
}

fn caption(s: &str) -> Caption {
    s.parse().unwrap()
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs())
}

// ---------------------------------------------------------------- 1

/// Density 2 on a unit-length segment `[0.25, 1.25)` of a ray sampled on `[0, 1.5]`.
fn slab_mask(n: usize) -> f64 {
    let delta = 1.5 / n as f64;
    let ts: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * delta).collect();
    let sigmas: Vec<f64> = ts.iter().map(|&t| if (0.25..1.25).contains(&t) { 2.0 } else { 0.0 }).collect();
    composite(&ts, delta, &sigmas, &vec![[1.0; 3]; n]).unwrap().0.mask
}

#[test]
fn criterion_01_renderer_oracle() {
    let _g = serial();
    let start = Instant::now();
    let exact = 1.0 - (-2.0f64).exp();
    let e1000 = (slab_mask(1000) - exact).abs();
    let (e256, e512) = ((slab_mask(256) - exact).abs(), (slab_mask(512) - exact).abs());
    let secs = start.elapsed().as_secs_f64();
    let pass = e1000 < 1e-3 && e256 / e512 >= 1.8 && secs < 1.0;
    report_line(1, "renderer oracle", pass, &format!("err@1000 {e1000:.2e}, err256/err512 {:.2}, {secs:.3}s", e256 / e512));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_algebraic_identities() {
    let _g = serial();
    let mut rng = stream(2, &[]);
    let schedule = NoiseSchedule::new(1000).unwrap();
    let (mut w_err, mut s_err, mut rec_err) = (0.0f64, 0.0f64, 0.0f64);
    let (mut cfg_ok, mut pack_ok) = (true, true);
    for case in 0..1000 {
        let n = rng.random_range(2..200);
        let delta = rng.random_range(1e-3..0.1);
        let ts: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * delta).collect();
        let sigmas: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..200.0) }).collect();
        let (out, _) = composite(&ts, delta, &sigmas, &vec![[0.5; 3]; n]).unwrap();
        w_err = w_err.max((out.weights.iter().sum::<f64>() - out.mask).abs());

        let t = rng.random_range(0..=1000);
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        s_err = s_err.max((a * a + s * s - 1.0).abs());

        let x0: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z = add_noise(&x0, &eps, t, &schedule).unwrap();
        let v = v_target(&x0, &eps, t, &schedule).unwrap();
        for i in 0..16 {
            rec_err = rec_err.max((x0_from_v(a, s, z[i], v[i]) - x0[i]).abs());
            rec_err = rec_err.max((eps_from_v(a, s, z[i], v[i]) - eps[i]).abs());
        }

        let (u, c) = (rng.random_range(-10.0f32..10.0), rng.random_range(-10.0f32..10.0));
        cfg_ok &= cfg_combine(u, c, 1.0).to_bits() == c.to_bits() && cfg_combine(u, c, 0.0).to_bits() == u.to_bits();

        let tp = TriPlane::random_normal(4, 6, 1.0, &mut stream(2, &[case]));
        let packed = tp.pack().unwrap();
        pack_ok &= packed.unpack().unwrap() == tp && PseudoImageStack::from_flat(4, &packed.to_flat()).unwrap() == packed;
    }
    // guidance at s = 1 is the conditional prediction, bit for bit, on a real model
    let model = Denoiser::new(
        DenoiserConfig { resolution: 8, widths: [8, 8, 16], groups: 4, heads: 2, temb_dim: 16, token_dim: 8 },
        &mut stream(2, &[1]),
    )
    .unwrap();
    let z = autograd::Tensor::new(&[6, 3, 8, 8], (0..6 * 192).map(|_| rng.random_range(-1.0f32..1.0)).collect());
    let cap = CaptionTokens::encode(&caption("red sphere"));
    let routing = Routing::from(tpdiff::diffusion::BatchKind::Triplane);
    let guided = tpdiff::diffusion::sample::guided_v(&model, &z, 500, cap, 1.0, routing).unwrap();
    let cond = model.predict(z.clone(), &[500; 6], &[cap], routing).unwrap();
    cfg_ok &= guided.iter().zip(cond.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let pass = w_err < 1e-12 && s_err < 1e-12 && rec_err < 1e-12 && cfg_ok && pack_ok;
    report_line(
        2,
        "algebraic identities",
        pass,
        &format!("1000 cases: weight-sum {w_err:.1e}, α²+σ² {s_err:.1e}, v/x0/eps {rec_err:.1e}, cfg s=1 bitwise {cfg_ok}, pack/unpack {pack_ok}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_gradients() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = stream(3, &[]);
    let h = 1e-6;
    let spec = SceneSpec::canonical(&caption("blue torus on red cube"));
    let target = FitTarget::from_scene(&spec, &ViewPlan { train_views: 6, heldout_views: 1, image_size: 24 }, 8, 1, 3).unwrap();
    let tp = TriPlane::random_normal(8, 6, 0.6, &mut rng);
    let dec = DecoderParams::init(18, &mut rng);
    let batch = target.sample_batch(&mut rng, 32);
    let w = LossWeights::default();
    let sampling = SamplingConfig::train(16, 3);
    let total = |tp: &TriPlane, dec: &DecoderParams| {
        let (c, _) = batch_loss_and_grad(tp, dec, &batch, &target.hull, &w, &sampling).unwrap();
        c.total(&w)
    };
    let (_, loss_grads) = batch_loss_and_grad(&tp, &dec, &batch, &target.hull, &w, &sampling).unwrap();

    let view = ViewRays::new(&CameraPose::sample(&mut rng), 8).unwrap();
    let g: Vec<f64> = (0..192).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sds = |tp: &TriPlane, dec: &DecoderParams| view.surrogate(tp, dec, &sampling, &g).unwrap().0;
    let (_, sds_grads) = view.surrogate(&tp, &dec, &sampling, &g).unwrap();

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (f, grads) in [(&total as &dyn Fn(&TriPlane, &DecoderParams) -> f64, &loss_grads), (&sds, &sds_grads)] {
        // random parameters among those the function depends on
        let texels: Vec<usize> = (0..tp.len()).filter(|&i| grads.triplane[i].abs() > 1e-6).collect();
        let weights: Vec<usize> = (0..dec.len()).filter(|&i| grads.decoder[i].abs() > 1e-6).collect();
        for _ in 0..50 {
            let i = texels[rng.random_range(0..texels.len())];
            let (mut a, mut b) = (tp.clone(), tp.clone());
            a.set_flat(i, tp.get_flat(i) + h);
            b.set_flat(i, tp.get_flat(i) - h);
            worst = worst.max(rel_err((f(&a, &dec) - f(&b, &dec)) / (2.0 * h), grads.triplane[i]));
            checked += 1;
        }
        for _ in 0..20 {
            let i = weights[rng.random_range(0..weights.len())];
            let (mut a, mut b) = (dec.clone(), dec.clone());
            a.params_mut()[i] += h;
            b.params_mut()[i] -= h;
            worst = worst.max(rel_err((f(&tp, &a) - f(&tp, &b)) / (2.0 * h), grads.decoder[i]));
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && checked >= 70 && secs < 120.0;
    report_line(3, "gradient suite", pass, &format!("{checked} parameters, worst rel. err {worst:.2e}, {secs:.1}s"));
    assert!(pass);
}

// ---------------------------------------------------------------- fixtures

/// Directory for trained fixtures when caching is enabled.
fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("TPDIFF_ACCEPTANCE_CACHE").map(|_| {
        let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache");
        std::fs::create_dir_all(&d).unwrap();
        d
    })
}

fn cached_decoder(name: &str, build: impl FnOnce() -> DecoderParams) -> DecoderParams {
    let path = cache_dir().map(|d| d.join(format!("{name}.ckpt")));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        return decoder_from_checkpoint(&Checkpoint::load(p).unwrap(), p).unwrap();
    }
    let dec = build();
    if let Some(p) = path {
        decoder_checkpoint(&dec).save(&p).unwrap();
    }
    dec
}

fn singles() -> Vec<Caption> {
    Caption::enumerate().into_iter().filter(|c| c.num_objects() == 1).collect()
}

/// Shared decoder for the 64² fitting criteria: eight single-primitive
/// scenes, 16 views of 64² each, 3000 joint steps of 1024 rays.
fn fitting_decoder() -> &'static DecoderParams {
    static DEC: OnceLock<DecoderParams> = OnceLock::new();
    DEC.get_or_init(|| {
        cached_decoder("decoder64", || {
            let plan = ViewPlan { train_views: 16, heldout_views: 0, image_size: 64 };
            let targets: Vec<FitTarget> = singles()
                .iter()
                .step_by(5)
                .chain(singles().iter().skip(2).step_by(5))
                .take(8)
                .enumerate()
                .map(|(i, c)| {
                    let spec = SceneSpec::for_caption(c, Sizing::Random(&mut stream(40, &[i as u64])), i as u64).unwrap();
                    FitTarget::from_scene(&spec, &plan, 64, 1, 40 + i as u64).unwrap()
                })
                .collect();
            let cfg = FitConfig { steps: 3000, rays_per_step: 1024, seed: 40, ..FitConfig::default() };
            train_shared_decoder(&targets, &cfg).unwrap().0
        })
    })
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_fitting_quality() {
    let dec = fitting_decoder();
    let _g = serial();
    let spec = SceneSpec::canonical(&caption("red sphere"));
    let target = FitTarget::from_scene(&spec, &ViewPlan::default(), 64, 1, 4).unwrap();
    let start = Instant::now();
    let (_, report) = fit_object(&target, dec, &FitConfig { seed: 4, ..FitConfig::default() }).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let m = report.heldout;
    let budget = scaled_budget(300.0);
    let pass = m.psnr >= 30.0 && m.iou >= 0.95 && m.depth_mae <= 0.02 && secs < budget;
    report_line(4, "fitting quality", pass, &format!(
        "held-out PSNR {:.2} dB, IoU {:.4}, depth MAE {:.4}, {secs:.0}s of {budget:.0}s on {} core(s)",
        m.psnr, m.iou, m.depth_mae, cores()
    ));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_depth_ablation() {
    let dec = fitting_decoder();
    let _g = serial();
    // reduced fits: 32² triplanes, 600 steps, 24 views of 64²
    let plan = ViewPlan { train_views: 24, heldout_views: 2, image_size: 64 };
    let singles = singles();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let c = &singles[(seed as usize * 7 + 3) % singles.len()];
        let spec = SceneSpec::for_caption(c, Sizing::Random(&mut stream(50, &[seed])), seed).unwrap();
        let target = FitTarget::from_scene(&spec, &plan, 32, 1, 50 + seed).unwrap();
        let mae = |depth: f64| {
            let mut cfg = FitConfig { steps: 600, rays_per_step: 1024, resolution: 32, n_samples: 48, seed: 50 + seed, ..FitConfig::default() };
            cfg.weights.depth = depth;
            fit_object(&target, dec, &cfg).unwrap().1.heldout.depth_mae
        };
        let (without, with) = (mae(0.0), mae(0.5));
        wins += usize::from(without > with);
        pairs.push(format!("{without:.4}/{with:.4}"));
    }
    let pass = wins == 5;
    report_line(5, "depth-loss ablation", pass, &format!("λ=0 worse on {wins}/5 seeds; MAE λ=0/λ=0.5: {}", pairs.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<_> = [(1, "a"), (8, "b"), (8, "c")]
        .iter()
        .map(|&(threads, name)| {
            let root = dir.path().join(name);
            common::run_pipeline(&root, threads, 10).map(|()| common::tree(&root))
        })
        .collect();
    let detail = match &runs[..] {
        [Ok(a), Ok(b), Ok(c)] => {
            let differing: Vec<_> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k) || a.get(*k) != c.get(*k)).collect();
            if differing.is_empty() {
                format!("{} artifacts byte-identical across 1 thread and two 8-thread runs", a.len())
            } else {
                format!("differing artifacts: {differing:?}")
            }
        }
        _ => format!("pipeline failed: {:?}", runs.iter().filter_map(|r| r.as_ref().err()).collect::<Vec<_>>()),
    };
    let pass = detail.contains("byte-identical");
    report_line(10, "determinism", pass, &detail);
    assert!(pass);
}

// ---------------------------------------------------------------- diffusion fixtures

/// Desk scale shared by the diffusion criteria.
const DESK_RES: usize = 16;
const DESK_CORPUS: usize = 200;
const DESK_FIT_STEPS: usize = 150;
const DESK_TRAIN_STEPS: usize = 2000;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const ORACLE_RES: usize = 32;
const ORACLE_SAMPLES: usize = 32;

fn desk_plan() -> ViewPlan {
    ViewPlan { train_views: 12, heldout_views: 2, image_size: 32 }
}

/// Two-object captions kept out of the triplane corpus: every 20th one.
fn heldout_captions() -> Vec<Caption> {
    Caption::enumerate().into_iter().filter(|c| c.num_objects() == 2).step_by(20).collect()
}

/// Five single-primitive captions, one per color, each shape at least once.
fn probe_captions() -> Vec<Caption> {
    ["red sphere", "green cube", "blue cylinder", "yellow torus", "white sphere"].map(caption).to_vec()
}

fn oracle() -> &'static OracleIndex {
    static ORACLE: OnceLock<OracleIndex> = OnceLock::new();
    ORACLE.get_or_init(|| OracleIndex::full(ORACLE_RES).unwrap())
}

/// Decoder for the desk corpus, trained on eight canonical single primitives
/// that cover every color and shape.
fn desk_decoder() -> &'static DecoderParams {
    static DEC: OnceLock<DecoderParams> = OnceLock::new();
    DEC.get_or_init(|| {
        cached_decoder("decoder16", || {
            let plan = ViewPlan { train_views: 16, heldout_views: 0, image_size: 32 };
            let targets: Vec<FitTarget> = (0..8)
                .map(|i| {
                    let c = Caption::objects(&[(PaletteColor::ALL[i % 5], ShapeKind::ALL[i % 4])]);
                    FitTarget::from_scene(&SceneSpec::canonical(&c), &plan, DESK_RES, 1, 60 + i as u64).unwrap()
                })
                .collect();
            let cfg = FitConfig { steps: 1500, rays_per_step: 1024, resolution: DESK_RES, n_samples: 32, seed: 60, ..FitConfig::default() };
            train_shared_decoder(&targets, &cfg).unwrap().0
        })
    })
}

fn desk_fit_config(seed: u64) -> FitConfig {
    FitConfig { steps: DESK_FIT_STEPS, rays_per_step: 512, resolution: DESK_RES, n_samples: 32, seed, ..FitConfig::default() }
}

/// Fitted triplanes of canonical scenes with random captions, none of them held out.
fn desk_corpus() -> &'static [(TriPlane, Caption)] {
    static CORPUS: OnceLock<Vec<(TriPlane, Caption)>> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let dir = cache_dir().map(|d| d.join("corpus16"));
        if let Some(d) = dir.as_ref().filter(|d| d.join(TriplaneIndex::FILE).exists()) {
            let index = TriplaneIndex::load(d).unwrap();
            return index.triplanes(d).unwrap().into_iter().zip(index.entries.into_iter().map(|e| e.caption)).collect();
        }
        let dec = desk_decoder();
        let heldout = heldout_captions();
        let mut rng = stream(61, &[]);
        let captions: Vec<Caption> =
            std::iter::repeat_with(|| random_caption(&mut rng, 0.5)).filter(|c| !heldout.contains(c)).take(DESK_CORPUS).collect();
        let corpus: Vec<(TriPlane, Caption)> = captions
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let target = FitTarget::from_scene(&SceneSpec::canonical(&c), &desk_plan(), DESK_RES, 1, 1000 + i as u64).unwrap();
                (fit_object(&target, dec, &desk_fit_config(1000 + i as u64)).unwrap().0, c)
            })
            .collect();
        if let Some(d) = dir {
            std::fs::create_dir_all(&d).unwrap();
            let mut index = TriplaneIndex::default();
            for (i, (tp, c)) in corpus.iter().enumerate() {
                let file = format!("{i:04}.tpln");
                save_triplane(tp, &d.join(&file)).unwrap();
                index.entries.push(IndexEntry { file, caption: c.clone(), scene: None });
            }
            index.save(&d).unwrap();
        }
        corpus
    })
}

/// Two oracle views per caption of the full grammar, held-out combinations included.
fn desk_images() -> Vec<ImageExample> {
    Caption::enumerate()
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| {
            (0..2u64).map(move |k| {
                let cam = CameraPose::sample(&mut stream(62, &[ci as u64, k]));
                ImageExample::from_view(&render_oracle_view(&SceneSpec::canonical(c), &cam, DESK_RES, DESK_RES).unwrap(), c.clone())
            })
        })
        .collect()
}

fn desk_model_config() -> DenoiserConfig {
    DenoiserConfig { resolution: DESK_RES, widths: [32, 32, 64], groups: 8, heads: 4, temb_dim: 64, token_dim: 32 }
}

/// Denoiser trained with the given 2D share; the seed drives initialization and training.
fn desk_model(seed: u64, p_2d: f64) -> &'static Denoiser {
    type Trained = Vec<((u64, u64), &'static Denoiser)>;
    static MODELS: OnceLock<Mutex<Trained>> = OnceLock::new();
    let key = (seed, p_2d.to_bits());
    let models = MODELS.get_or_init(Default::default);
    if let Some(&(_, m)) = models.lock().unwrap().iter().find(|(k, _)| *k == key) {
        return m;
    }
    let path = cache_dir().map(|d| d.join(format!("denoiser_{seed}_{p_2d}.ckpt")));
    let model = match path.as_ref().filter(|p| p.exists()) {
        Some(p) => denoiser_from_checkpoint(&Checkpoint::load(p).unwrap(), p).unwrap().0,
        None => {
            let corpus = Corpus {
                resolution: DESK_RES,
                triplanes: desk_corpus().iter().map(|(tp, c)| TriplaneExample::new(tp, c.clone()).unwrap()).collect(),
                images: desk_images(),
            };
            let mut model = Denoiser::new(desk_model_config(), &mut stream(seed, &[63])).unwrap();
            // from-scratch desk model: 1e-3 on every group instead of the fine-tuning 1e-4
            let cfg = TrainConfig { steps: DESK_TRAIN_STEPS, p_2d, seed, lr_rest: 1e-3, ..TrainConfig::default() };
            train(&mut model, &corpus, &cfg).unwrap();
            if let Some(p) = &path {
                denoiser_checkpoint(&model, cfg.t_max).save(p).unwrap();
            }
            model
        }
    };
    let model: &'static Denoiser = Box::leak(Box::new(model));
    models.lock().unwrap().push((key, model));
    model
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(1000).unwrap()
}

/// Samples `requests` at guidance `scale` and ranks each against its caption.
fn sample_and_retrieve(model: &Denoiser, requests: &[(Caption, u64)], scale: f32) -> (Vec<TriPlane>, Vec<Retrieval>) {
    let cfg = SampleConfig { cfg_scale: scale, ..SampleConfig::default() };
    let tps = sample_many(model, &schedule(), requests, &cfg).unwrap();
    let rs = tps.iter().zip(requests).map(|(tp, (c, _))| oracle().retrieve_triplane(tp, desk_decoder(), c, ORACLE_SAMPLES).unwrap()).collect();
    (tps, rs)
}

fn probe_requests() -> Vec<(Caption, u64)> {
    probe_captions().into_iter().flat_map(|c| (0..5u64).map(move |s| (c.clone(), s))).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_2d_mixing() {
    let _g = serial();
    let requests: Vec<(Caption, u64)> = heldout_captions().into_iter().map(|c| (c, 6)).collect();
    let r_at_1 = |p_2d: f64| -> Vec<f64> {
        DESK_SEEDS
            .iter()
            .map(|&seed| RetrievalStats::from_retrievals(&sample_and_retrieve(desk_model(seed, p_2d), &requests, 5.0).1).r_at_1)
            .collect()
    };
    let (without, with) = (r_at_1(0.0), r_at_1(0.5));
    let (m0, m5) = (median(without.clone()), median(with.clone()));
    let pass = m0 < m5;
    report_line(6, "2D-mixing ablation", pass, &format!(
        "held-out R@1 median p_2d=0 {m0:.3} vs p_2d=0.5 {m5:.3} (per seed {without:?} / {with:?}, {} captions)",
        requests.len()
    ));
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_cfg_sweep() {
    let _g = serial();
    let requests = probe_requests();
    let score = |seed: u64, s: f32| mean(&sample_and_retrieve(desk_model(seed, 0.5), &requests, s).1.iter().map(|r| r.score).collect::<Vec<_>>());
    let s1: Vec<f64> = DESK_SEEDS.iter().map(|&seed| score(seed, 1.0)).collect();
    let s5: Vec<f64> = DESK_SEEDS.iter().map(|&seed| score(seed, 5.0)).collect();
    let (m1, m5) = (median(s1.clone()), median(s5.clone()));
    let pass = m5 > m1;
    report_line(7, "CFG sweep", pass, &format!("median oracle score s=5 {m5:.3} vs s=1 {m1:.3} (per seed {s5:.3?} / {s1:.3?})"));
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_end_to_end_sampling() {
    let _g = serial();
    let model = desk_model(0, 0.5);
    let requests = probe_requests();
    let (_, rs) = sample_and_retrieve(model, &requests, 5.0);
    let hits = rs.iter().filter(|r| r.rank == 1).count();
    let start = Instant::now();
    sample(model, &schedule(), &caption("red sphere"), &SampleConfig::default(), 99).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let budget = scaled_budget(30.0);
    let pass = hits * 5 >= requests.len() * 4 && secs < budget;
    report_line(8, "end-to-end sampling", pass, &format!(
        "{hits}/{} samples at rank 1 (ranks {:?}); one 50-step sample {secs:.1}s of {budget:.0}s",
        requests.len(),
        rs.iter().map(|r| r.rank).collect::<Vec<_>>()
    ));
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_refinement() {
    let _g = serial();
    let dec = desk_decoder();
    let model = desk_model(0, 0.5);
    let before = denoiser_checkpoint(model, 1000).encode();

    // a converged fit: 4x the corpus budget on a probe scene
    let c = caption("blue cylinder");
    let target = FitTarget::from_scene(&SceneSpec::canonical(&c), &ViewPlan { heldout_views: 4, ..desk_plan() }, DESK_RES, 1, 90).unwrap();
    let (fit, fit_report) = fit_object(&target, dec, &FitConfig { steps: 4 * DESK_FIT_STEPS, ..desk_fit_config(90) }).unwrap();
    let rcfg = RefineConfig { seed: 90, n_samples: 32, ..RefineConfig::default() };
    let (tp, dec2, _) = refine(&fit, dec, &c, model, &schedule(), &rcfg).unwrap();
    let psnr_before = fit_report.heldout.psnr;
    let psnr_after = evaluate_views(&tp, &dec2, &target.heldout, 32).unwrap().psnr;

    // sampled shapes: oracle score before and after a shorter refinement
    let requests: Vec<(Caption, u64)> = (0..10u64).map(|s| (probe_captions()[s as usize % 5].clone(), 90 + s)).collect();
    let (samples, rs) = sample_and_retrieve(model, &requests, 5.0);
    let deltas: Vec<f64> = samples
        .iter()
        .zip(&requests)
        .zip(&rs)
        .map(|((tp, (c, s)), r)| {
            let cfg = RefineConfig { steps: REFINE_SAMPLE_STEPS, seed: *s, n_samples: 32, ..RefineConfig::default() };
            let (tp2, dec2, _) = refine(tp, dec, c, model, &schedule(), &cfg).unwrap();
            oracle().retrieve_triplane(&tp2, &dec2, c, ORACLE_SAMPLES).unwrap().score - r.score
        })
        .collect();
    let unchanged = denoiser_checkpoint(model, 1000).encode() == before;
    let drop = psnr_before - psnr_after;
    let med = median(deltas.clone());
    let pass = drop < 3.0 && med >= 0.0 && unchanged;
    report_line(9, "refinement sanity", pass, &format!(
        "converged fit PSNR {psnr_before:.2} -> {psnr_after:.2} dB; median oracle score change {med:+.4} over 10 samples {deltas:+.3?}; denoiser bitwise unchanged {unchanged}"
    ));
    assert!(pass);
}

const REFINE_SAMPLE_STEPS: usize = 300;
