//! The `tpdiff` command line.
//!
//! Exit codes: 0 on success, 1 for invalid arguments, configuration or
//! inputs, 2 when a run aborts.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::camera::{CameraPose, Projection, CAMERA_RADIUS, DEFAULT_FOV_Y};
use crate::diffusion::{self, Corpus, Denoiser, DenoiserConfig, ImageExample, NoiseSchedule, SampleConfig, TrainConfig, TriplaneExample};
use crate::error::{Error, Result};
use crate::fitting::{self, FitConfig, Finalize, LossWeights};
use crate::refine::{self, RefineConfig};
use crate::rng::{derive, label, stream};
use crate::scene::{render_oracle_view, Caption, DEFAULT_HULL_DILATION};
use crate::triplane::{DecoderParams, TriPlane};
use crate::volrend::{render_view, SamplingConfig};
use crate::workbench::config::KvConfig;
use crate::workbench::dataset::{encode_depth, encode_rgb_png, generate_dataset, Dataset, DatasetConfig, OutputLock};
use crate::workbench::io::{
    decoder_checkpoint, decoder_from_checkpoint, denoiser_checkpoint, denoiser_from_checkpoint, load_triplane, save_triplane,
    write_file, Checkpoint, IndexEntry, TriplaneIndex,
};
use crate::workbench::mesh::export_mesh;
use crate::workbench::metrics::{MetricsEntry, MetricsReport};
use crate::workbench::retrieval::{OracleIndex, RETRIEVAL_ELEVATION_DEG};

#[derive(Parser, Debug)]
#[command(name = "tpdiff", version, about = "Triplane fitting, pseudo-image diffusion and SDS refinement", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural multi-view dataset.
    GenData(GenDataArgs),
    /// Train the shared decoder jointly with triplanes of a scene subset.
    TrainDecoder(TrainDecoderArgs),
    /// Fit one triplane per scene against a frozen decoder.
    Fit(FitArgs),
    /// Train the pseudo-image denoiser on fitted triplanes and 2D views.
    TrainDiffusion(TrainDiffusionArgs),
    /// Sample triplanes for a caption.
    Sample(SampleArgs),
    /// Refine a triplane with score distillation.
    Refine(RefineArgs),
    /// Render one view of a triplane.
    Render(RenderArgs),
    /// Extract a colored iso-surface mesh.
    ExportMesh(ExportMeshArgs),
    /// Evaluate view metrics and oracle retrieval for a triplane directory.
    Eval(EvalArgs),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(a) => &a.common,
            Command::TrainDecoder(a) => &a.common,
            Command::Fit(a) => &a.common,
            Command::TrainDiffusion(a) => &a.common,
            Command::Sample(a) => &a.common,
            Command::Refine(a) => &a.common,
            Command::Render(a) => &a.common,
            Command::ExportMesh(a) => &a.common,
            Command::Eval(a) => &a.common,
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 200)]
    n_scenes: usize,
    #[arg(long, default_value_t = 64)]
    views: usize,
    /// Views per scene reserved for evaluation.
    #[arg(long, default_value_t = 4)]
    heldout_views: usize,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 0.5)]
    p_single: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FinalizeArg {
    Clamp,
    Affine,
}

#[derive(Args, Debug)]
struct FitOptions {
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 4096)]
    rays: usize,
    /// Initial triplane learning rate, decayed linearly to zero.
    #[arg(long, default_value_t = 2e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    decoder_lr: f64,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 6)]
    channels: usize,
    #[arg(long, default_value_t = 0.05)]
    init_std: f64,
    #[arg(long, value_enum, default_value = "clamp")]
    finalize: FinalizeArg,
    #[arg(long, default_value_t = DEFAULT_HULL_DILATION)]
    hull_dilation: usize,
    #[arg(long, default_value_t = 0.2)]
    lambda_l1: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_mask: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda_depth: f64,
    #[arg(long, default_value_t = 0.05)]
    lambda_l2: f64,
    #[arg(long, default_value_t = 0.05)]
    lambda_tv: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_hull: f64,
}

impl FitOptions {
    fn config(&self, seed: u64) -> FitConfig {
        FitConfig {
            weights: LossWeights {
                l1: self.lambda_l1,
                mask: self.lambda_mask,
                depth: self.lambda_depth,
                l2: self.lambda_l2,
                tv: self.lambda_tv,
                hull: self.lambda_hull,
            },
            rays_per_step: self.rays,
            steps: self.steps,
            lr: self.lr,
            decoder_lr: self.decoder_lr,
            n_samples: self.samples,
            resolution: self.resolution,
            channels: self.channels,
            init_std: self.init_std,
            finalize: match self.finalize {
                FinalizeArg::Clamp => Finalize::Clamp,
                FinalizeArg::Affine => Finalize::Affine,
            },
            seed,
        }
    }
}

#[derive(Args, Debug)]
struct SceneRange {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    first: usize,
    /// Number of scenes; all remaining scenes when omitted.
    #[arg(long)]
    count: Option<usize>,
}

impl SceneRange {
    fn indices(&self, ds: &Dataset) -> Result<std::ops::Range<usize>> {
        let n = ds.manifest.scenes.len();
        let end = self.count.map_or(n, |c| self.first + c);
        if self.first >= end || end > n {
            return Err(Error::OutOfRange { what: "scene range", detail: format!("{}..{end} of {n} scenes", self.first) });
        }
        Ok(self.first..end)
    }
}

#[derive(Args, Debug)]
struct TrainDecoderArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scenes: SceneRange,
    #[command(flatten)]
    fit: FitOptions,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    scenes: SceneRange,
    /// Decoder checkpoint written by `train-decoder`.
    #[arg(long)]
    decoder: PathBuf,
    #[command(flatten)]
    fit: FitOptions,
}

#[derive(Args, Debug)]
struct TrainDiffusionArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of fitted triplanes with an index.
    #[arg(long)]
    triplanes: PathBuf,
    /// Dataset whose scenes supply the 2D images.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    images_per_scene: usize,
    #[arg(long, default_value_t = 20000)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0.5)]
    p_2d: f64,
    #[arg(long, default_value_t = 0.05)]
    null_prob: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr_plane: f32,
    #[arg(long, default_value_t = 1e-4)]
    lr_rest: f32,
    #[arg(long, default_value_t = diffusion::schedule::DEFAULT_T)]
    diffusion_steps: usize,
    #[arg(long, default_value_t = diffusion::schedule::MIN_SNR_GAMMA)]
    min_snr_gamma: f64,
    /// Channel widths of the three U-Net levels.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    groups: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    temb_dim: usize,
    #[arg(long, default_value_t = 64)]
    token_dim: usize,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Denoiser checkpoint written by `train-diffusion`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    caption: String,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 5.0)]
    cfg: f32,
    /// Samples to draw; sample `k` uses seed `seed + k`.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    clip_denoised: bool,
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    triplane: PathBuf,
    #[arg(long)]
    decoder: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    caption: String,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 20.0)]
    cfg: f32,
    #[arg(long, default_value_t = 0.1)]
    t_min: f64,
    #[arg(long, default_value_t = 0.5)]
    t_max: f64,
    #[arg(long, default_value_t = 1)]
    views_per_step: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr_triplane: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_decoder: f64,
    #[arg(long, default_value_t = 0.025)]
    lambda_l2: f64,
    #[arg(long, default_value_t = 0.025)]
    lambda_tv: f64,
    #[arg(long, default_value_t = 64)]
    samples: usize,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    triplane: PathBuf,
    #[arg(long)]
    decoder: PathBuf,
    /// Degrees.
    #[arg(long, default_value_t = 0.0)]
    azimuth: f64,
    /// Degrees.
    #[arg(long, default_value_t = RETRIEVAL_ELEVATION_DEG)]
    elevation: f64,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, default_value_t = 128)]
    samples: usize,
}

#[derive(Args, Debug)]
struct ExportMeshArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    triplane: PathBuf,
    #[arg(long)]
    decoder: PathBuf,
    /// Grid nodes per axis.
    #[arg(long, default_value_t = 128)]
    grid: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of triplanes with an index.
    #[arg(long)]
    triplanes: PathBuf,
    #[arg(long)]
    decoder: PathBuf,
    /// Dataset for held-out view metrics of fitted triplanes.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    oracle_resolution: usize,
    #[arg(long, default_value_t = 64)]
    samples: usize,
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match parse(&argv) {
        Ok(cli) => cli,
        Err(code) => return code,
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn clap_exit(e: clap::Error) -> i32 {
    let _ = e.print();
    match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
        _ => 1,
    }
}

/// Parses twice when a config file is given: its entries are spliced in
/// ahead of the command-line flags, which therefore win.
fn parse(argv: &[OsString]) -> std::result::Result<Cli, i32> {
    let cli = Cli::try_parse_from(argv).map_err(clap_exit)?;
    let Some(path) = cli.command.common().config.clone() else {
        return Ok(cli);
    };
    let file_args = KvConfig::load(&path).and_then(|c| c.as_args()).map_err(|e| {
        eprintln!("error: {e}");
        1
    })?;
    let sub = argv.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|i| i + 1).ok_or(1)?;
    let mut merged: Vec<OsString> = argv[..=sub].to_vec();
    merged.extend(file_args.into_iter().map(OsString::from));
    merged.extend(argv[sub + 1..].iter().cloned());
    Cli::try_parse_from(&merged).map_err(clap_exit)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainDecoder(a) => train_decoder(a),
        Command::Fit(a) => fit(a),
        Command::TrainDiffusion(a) => train_diffusion(a),
        Command::Sample(a) => sample(a),
        Command::Refine(a) => refine_cmd(a),
        Command::Render(a) => render(a),
        Command::ExportMesh(a) => export_mesh_cmd(a),
        Command::Eval(a) => eval(a),
    }
}

fn load_decoder(path: &Path) -> Result<DecoderParams> {
    decoder_from_checkpoint(&Checkpoint::load(path)?, path)
}

fn load_denoiser(path: &Path) -> Result<(Denoiser, NoiseSchedule)> {
    let (model, t_max) = denoiser_from_checkpoint(&Checkpoint::load(path)?, path)?;
    Ok((model, NoiseSchedule::new(t_max)?))
}

fn parse_caption(text: &str) -> Result<Caption> {
    text.parse()
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = DatasetConfig {
        n_scenes: a.n_scenes,
        views_per_scene: a.views,
        heldout_views: a.heldout_views,
        resolution: a.resolution,
        p_single: a.p_single,
        seed: a.common.seed,
    };
    let m = generate_dataset(&cfg, &a.common.out)?;
    eprintln!("wrote {} scenes, {} views", m.scenes.len(), m.num_views());
    Ok(())
}

fn train_decoder(a: TrainDecoderArgs) -> Result<()> {
    let ds = Dataset::open(&a.scenes.data)?;
    let cfg = a.fit.config(a.common.seed);
    cfg.validate()?;
    let targets = a
        .scenes
        .indices(&ds)?
        .map(|i| ds.fit_target(i, cfg.resolution, a.fit.hull_dilation))
        .collect::<Result<Vec<_>>>()?;
    let _lock = OutputLock::acquire(&a.common.out)?;
    let start = Instant::now();
    let (dec, _, report) = fitting::train_shared_decoder(&targets, &cfg)?;
    decoder_checkpoint(&dec).save(&a.common.out.join("decoder.ckpt"))?;
    let last = report.totals.last().copied().unwrap_or(f64::NAN);
    let summary = format!("objects = {}\nsteps = {}\nfinal_loss = {last}\n", targets.len(), cfg.steps);
    write_file(&a.common.out.join("decoder.txt"), summary.as_bytes())?;
    eprintln!("decoder trained in {:.1}s, final loss {last:.5}", start.elapsed().as_secs_f64());
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let ds = Dataset::open(&a.scenes.data)?;
    let dec = load_decoder(&a.decoder)?;
    let base = a.fit.config(a.common.seed);
    base.validate()?;
    let range = a.scenes.indices(&ds)?;
    let _lock = OutputLock::acquire(&a.common.out)?;
    let mut index = TriplaneIndex::default();
    for i in range {
        let target = ds.fit_target(i, base.resolution, a.fit.hull_dilation)?;
        let cfg = FitConfig { seed: derive(a.common.seed, &[label::FIT, i as u64]), ..base.clone() };
        let (tp, report) = fitting::fit_object(&target, &dec, &cfg)?;
        let file = format!("{i:05}.tpln");
        save_triplane(&tp, &a.common.out.join(&file))?;
        let caption = ds.manifest.scenes[i].caption.clone();
        let h = report.heldout;
        let sidecar = format!(
            "scene = {i}\ncaption = {caption}\nsteps = {}\nfinal_loss = {}\npsnr = {}\niou = {}\ndepth_mae = {}\ninside_fraction = {}\n",
            cfg.steps,
            report.totals.last().copied().unwrap_or(f64::NAN),
            h.psnr,
            h.iou,
            h.depth_mae,
            report.inside_fraction
        );
        write_file(&a.common.out.join(format!("{i:05}.fit.txt")), sidecar.as_bytes())?;
        eprintln!("scene {i} ({caption}): psnr {:.2} iou {:.3} depth {:.4} in {:.1}s", h.psnr, h.iou, h.depth_mae, report.wall_time_s);
        index.entries.push(IndexEntry { file, caption, scene: Some(i) });
    }
    index.save(&a.common.out)
}

fn train_diffusion(a: TrainDiffusionArgs) -> Result<()> {
    let index = TriplaneIndex::load(&a.triplanes)?;
    let tps = index.triplanes(&a.triplanes)?;
    let Some(first) = tps.first() else {
        return Err(Error::OutOfRange { what: "triplane corpus", detail: "empty index".into() });
    };
    let resolution = first.resolution();
    let widths: [usize; 3] = a
        .widths
        .as_slice()
        .try_into()
        .map_err(|_| Error::Config(format!("widths needs 3 values, got {}", a.widths.len())))?;
    let model_cfg = DenoiserConfig { resolution, widths, groups: a.groups, heads: a.heads, temb_dim: a.temb_dim, token_dim: a.token_dim };
    let train_cfg = TrainConfig {
        steps: a.steps,
        batch_items: a.batch,
        p_2d: a.p_2d,
        null_prob: a.null_prob,
        lr_plane: a.lr_plane,
        lr_rest: a.lr_rest,
        t_max: a.diffusion_steps,
        min_snr_gamma: a.min_snr_gamma,
        seed: a.common.seed,
    };
    train_cfg.validate()?;
    let triplanes = tps
        .iter()
        .zip(&index.entries)
        .map(|(tp, e)| TriplaneExample::new(tp, e.caption.clone()))
        .collect::<Result<Vec<_>>>()?;
    let images = match &a.data {
        Some(dir) => images_from_dataset(&Dataset::open(dir)?, resolution, a.images_per_scene)?,
        None => Vec::new(),
    };
    let corpus = Corpus { resolution, triplanes, images };
    let mut model = Denoiser::new(model_cfg, &mut stream(a.common.seed, &[label::DIFFUSION]))?;
    let _lock = OutputLock::acquire(&a.common.out)?;
    let start = Instant::now();
    let report = diffusion::train(&mut model, &corpus, &train_cfg)?;
    denoiser_checkpoint(&model, train_cfg.t_max).save(&a.common.out.join("denoiser.ckpt"))?;
    let used = KvConfig {
        entries: [
            ("seed", a.common.seed.to_string()),
            ("steps", a.steps.to_string()),
            ("batch", a.batch.to_string()),
            ("p-2d", a.p_2d.to_string()),
            ("null-prob", a.null_prob.to_string()),
            ("lr-plane", a.lr_plane.to_string()),
            ("lr-rest", a.lr_rest.to_string()),
            ("diffusion-steps", a.diffusion_steps.to_string()),
            ("min-snr-gamma", a.min_snr_gamma.to_string()),
            ("widths", format!("{},{},{}", widths[0], widths[1], widths[2])),
            ("groups", a.groups.to_string()),
            ("heads", a.heads.to_string()),
            ("temb-dim", a.temb_dim.to_string()),
            ("token-dim", a.token_dim.to_string()),
            ("images-per-scene", a.images_per_scene.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect(),
    };
    write_file(&a.common.out.join("train.txt"), used.render().as_bytes())?;
    let losses: String = report.losses.iter().map(|l| format!("{l}\n")).collect();
    write_file(&a.common.out.join("losses.txt"), losses.as_bytes())?;
    eprintln!("trained {} steps ({} on 2D batches) in {:.1}s", a.steps, report.image_steps.iter().filter(|&&b| b).count(), start.elapsed().as_secs_f64());
    Ok(())
}

/// Oracle renders at the model resolution from the first training cameras of every scene.
fn images_from_dataset(ds: &Dataset, resolution: usize, per_scene: usize) -> Result<Vec<ImageExample>> {
    let mut out = Vec::new();
    for scene in &ds.manifest.scenes {
        for v in scene.views.iter().filter(|v| !v.heldout).take(per_scene) {
            let view = render_oracle_view(&scene.spec, &v.camera, resolution, resolution)?;
            out.push(ImageExample::from_view(&view, scene.caption.clone()));
        }
    }
    Ok(out)
}

fn sample(a: SampleArgs) -> Result<()> {
    let caption = parse_caption(&a.caption)?;
    let (model, schedule) = load_denoiser(&a.model)?;
    let cfg = SampleConfig { steps: a.steps, cfg_scale: a.cfg, clip_denoised: a.clip_denoised };
    let jobs: Vec<(Caption, u64)> = (0..a.count as u64).map(|k| (caption.clone(), a.common.seed.wrapping_add(k))).collect();
    let _lock = OutputLock::acquire(&a.common.out)?;
    let start = Instant::now();
    let tps = diffusion::sample_many(&model, &schedule, &jobs, &cfg)?;
    let mut index = TriplaneIndex::default();
    for (k, tp) in tps.iter().enumerate() {
        let file = format!("sample_{k:03}.tpln");
        save_triplane(tp, &a.common.out.join(&file))?;
        index.entries.push(IndexEntry { file, caption: caption.clone(), scene: None });
    }
    eprintln!("sampled {} triplane(s) in {:.1}s", tps.len(), start.elapsed().as_secs_f64());
    index.save(&a.common.out)
}

fn refine_cmd(a: RefineArgs) -> Result<()> {
    let caption = parse_caption(&a.caption)?;
    let tp = load_triplane(&a.triplane)?;
    let dec = load_decoder(&a.decoder)?;
    let (model, schedule) = load_denoiser(&a.model)?;
    let cfg = RefineConfig {
        steps: a.steps,
        t_min: a.t_min,
        t_max: a.t_max,
        cfg_scale: a.cfg,
        views_per_step: a.views_per_step,
        lr_triplane: a.lr_triplane,
        lr_decoder: a.lr_decoder,
        l2_weight: a.lambda_l2,
        tv_weight: a.lambda_tv,
        n_samples: a.samples,
        seed: a.common.seed,
    };
    cfg.validate()?;
    let _lock = OutputLock::acquire(&a.common.out)?;
    let start = Instant::now();
    let (tp, dec, report) = refine::refine(&tp, &dec, &caption, &model, &schedule, &cfg)?;
    save_triplane(&tp, &a.common.out.join("refined.tpln"))?;
    decoder_checkpoint(&dec).save(&a.common.out.join("decoder.ckpt"))?;
    let log: String = report.timesteps.iter().zip(&report.surrogate).map(|(t, s)| format!("{t} {s}\n")).collect();
    write_file(&a.common.out.join("refine.txt"), log.as_bytes())?;
    TriplaneIndex { entries: vec![IndexEntry { file: "refined.tpln".into(), caption, scene: None }] }.save(&a.common.out)?;
    eprintln!("refined {} steps in {:.1}s", a.steps, start.elapsed().as_secs_f64());
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let tp = load_triplane(&a.triplane)?;
    let dec = load_decoder(&a.decoder)?;
    let cam = CameraPose::orbit(
        a.azimuth.to_radians(),
        a.elevation.to_radians(),
        CAMERA_RADIUS,
        Projection::Perspective { fov_y: DEFAULT_FOV_Y },
    );
    let v = render_view(&tp, &dec, &cam, a.resolution, a.resolution, &SamplingConfig::eval(a.samples))?;
    let _lock = OutputLock::acquire(&a.common.out)?;
    let rgb: Vec<f32> = v.rgb.iter().map(|&x| x as f32).collect();
    let to_f32 = |xs: &[f64]| xs.iter().map(|&x| x as f32).collect::<Vec<_>>();
    write_file(&a.common.out.join("rgb.png"), &encode_rgb_png(&rgb, v.height, v.width)?)?;
    write_file(&a.common.out.join("mask.bin"), &encode_depth(&to_f32(&v.mask), v.height, v.width))?;
    write_file(&a.common.out.join("depth.bin"), &encode_depth(&to_f32(&v.depth), v.height, v.width))
}

fn export_mesh_cmd(a: ExportMeshArgs) -> Result<()> {
    let tp = load_triplane(&a.triplane)?;
    let dec = load_decoder(&a.decoder)?;
    let mesh = export_mesh(&tp, &dec, a.grid)?;
    let _lock = OutputLock::acquire(&a.common.out)?;
    let mut buf = Vec::new();
    mesh.write_ply(&mut buf)?;
    write_file(&a.common.out.join("mesh.ply"), &buf)?;
    if mesh.is_empty() {
        eprintln!("empty density field: wrote a mesh with no faces");
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let index = TriplaneIndex::load(&a.triplanes)?;
    let dec = load_decoder(&a.decoder)?;
    let ds = a.data.as_deref().map(Dataset::open).transpose()?;
    let oracle = OracleIndex::full(a.oracle_resolution)?;
    let mut entries = Vec::with_capacity(index.entries.len());
    for e in &index.entries {
        let tp: TriPlane = load_triplane(&a.triplanes.join(&e.file))?;
        let views = match (&ds, e.scene) {
            (Some(ds), Some(i)) => {
                let scene = ds.load_scene(i)?;
                Some(fitting::evaluate_views(&tp, &dec, &scene.heldout, a.samples)?)
            }
            _ => None,
        };
        let retrieval = oracle.retrieve_triplane(&tp, &dec, &e.caption, a.samples)?;
        entries.push(MetricsEntry { file: e.file.clone(), caption: e.caption.to_string(), views, retrieval });
    }
    let report = MetricsReport::new(entries);
    let _lock = OutputLock::acquire(&a.common.out)?;
    let text = serde_json::to_string_pretty(&report).expect("serializable");
    write_file(&a.common.out.join("metrics.json"), text.as_bytes())?;
    eprintln!("R@1 {:.3} R@10 {:.3} over {}", report.retrieval.r_at_1, report.retrieval.r_at_10, report.retrieval.count);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn parsed(args: &[&str]) -> Cli {
        parse(&args.iter().map(OsString::from).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn defaults_follow_the_reference_values() {
        let Command::Sample(s) = parsed(&["tpdiff", "sample", "--out", "o", "--model", "m", "--caption", "red sphere"]).command else {
            panic!("sample");
        };
        assert_eq!((s.steps, s.cfg, s.common.seed), (50, 5.0, 0));
        let Command::Refine(r) = parsed(&["tpdiff", "refine", "--out", "o", "--model", "m", "--caption", "c", "--triplane", "t", "--decoder", "d"]).command
        else {
            panic!("refine");
        };
        assert_eq!((r.steps, r.cfg, r.t_min, r.t_max), (2000, 20.0, 0.1, 0.5));
    }

    #[test]
    fn config_file_sits_between_flags_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "steps = 7\ncfg = 2.5\n").unwrap();
        let p = path.to_str().unwrap();
        let Command::Sample(s) =
            parsed(&["tpdiff", "sample", "--config", p, "--out", "o", "--model", "m", "--caption", "red sphere", "--steps", "9"]).command
        else {
            panic!("sample");
        };
        assert_eq!((s.steps, s.cfg, s.count), (9, 2.5, 1));
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["tpdiff", "sample", "--out", "o", "--bogus"]), 1);
        assert_eq!(run(["tpdiff", "frobnicate"]), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "no-such-key = 1\n").unwrap();
        let out = dir.path().join("o");
        let args = ["tpdiff", "gen-data", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()];
        assert_eq!(run(args), 1);
    }

    #[test]
    fn validation_and_runtime_codes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let o = out.to_str().unwrap();
        assert_eq!(run(["tpdiff", "gen-data", "--out", o, "--n-scenes", "0"]), 1);
        // missing input file
        assert_eq!(run(["tpdiff", "sample", "--out", o, "--model", "/nonexistent/m.ckpt", "--caption", "red sphere"]), 2);
        assert_eq!(run(["tpdiff", "sample", "--out", o, "--model", "m", "--caption", "purple sphere"]), 1);
    }
}
