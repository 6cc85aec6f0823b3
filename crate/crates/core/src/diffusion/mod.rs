//! Pseudo-image diffusion: schedule, denoiser, training and sampling.

pub mod model;
pub mod sample;
pub mod schedule;
pub mod tokens;
pub mod train;

pub use model::{BatchKind, Denoiser, DenoiserConfig, Routing};
pub use sample::{sample, sample_chain, sample_many, SampleConfig};
pub use schedule::{add_noise, cfg_combine, loss_weight, v_target, NoiseSchedule};
pub use tokens::CaptionTokens;
pub use train::{train, Corpus, ImageExample, TrainConfig, TrainReport, TriplaneExample};
