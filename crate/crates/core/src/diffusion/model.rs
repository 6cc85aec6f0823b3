//! The pseudo-image denoiser: a three-level convolutional U-Net predicting `v`.
//!
//! Images of one triplane are stacked along the batch axis. At the two lowest
//! resolutions, self-attention runs over the tokens of all six images of an
//! item jointly, and caption cross-attention follows every self-attention. A
//! learnable embedding per pseudo-image is added to the timestep embedding;
//! this is the only way image identity enters the network.

use autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokens::{CaptionTokens, MAX_TOKENS, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::triplane::PSEUDO_IMAGES;

/// Optimizer group of the per-image embeddings.
pub const GROUP_PLANE: usize = 0;
/// Optimizer group of every other parameter.
pub const GROUP_REST: usize = 1;
const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub resolution: usize,
    pub widths: [usize; 3],
    pub groups: usize,
    pub heads: usize,
    pub temb_dim: usize,
    pub token_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { resolution: 64, widths: [64, 128, 256], groups: 8, heads: 4, temb_dim: 128, token_dim: 64 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::OutOfRange { what: "denoiser configuration", detail });
        if self.resolution < 4 || !self.resolution.is_multiple_of(4) {
            return bad(format!("resolution {} must be a positive multiple of 4", self.resolution));
        }
        for &w in &self.widths {
            if w == 0 || w % self.groups != 0 || w % self.heads != 0 {
                return bad(format!("width {w} must be divisible by {} groups and {} heads", self.groups, self.heads));
            }
        }
        if self.temb_dim < 2 || !self.temb_dim.is_multiple_of(2) || self.token_dim == 0 {
            return bad(format!("temb_dim {} token_dim {}", self.temb_dim, self.token_dim));
        }
        Ok(())
    }
}

/// What one batch holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchKind {
    /// Six pseudo-images per item, attended jointly, with plane embeddings.
    Triplane,
    /// One image per item, per-image attention, no plane embedding.
    Image2D,
}

impl BatchKind {
    pub fn images_per_item(self) -> usize {
        match self {
            BatchKind::Triplane => PSEUDO_IMAGES,
            BatchKind::Image2D => 1,
        }
    }
}

struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

struct ResBlock {
    norm1: Norm,
    conv1: (ParamId, ParamId),
    temb: (ParamId, ParamId),
    norm2: Norm,
    conv2: (ParamId, ParamId),
    skip: Option<ParamId>,
}

struct SelfAttn {
    norm: Norm,
    qkv: [ParamId; 3],
    out: (ParamId, ParamId),
}

struct CrossAttn {
    norm: Norm,
    q: ParamId,
    kv: [ParamId; 2],
    out: (ParamId, ParamId),
}

struct AttnStage {
    attn: SelfAttn,
    cross: CrossAttn,
}

struct Layout {
    temb1: (ParamId, ParamId),
    temb2: (ParamId, ParamId),
    plane_emb: ParamId,
    token_emb: ParamId,
    conv_in: (ParamId, ParamId),
    down: [ResBlock; 3],
    down_attn: [AttnStage; 2],
    downsample: [(ParamId, ParamId); 2],
    mid: ResBlock,
    mid_attn: AttnStage,
    up: [ResBlock; 3],
    up_attn: [AttnStage; 2],
    upsample: [(ParamId, ParamId); 2],
    out_norm: Norm,
    conv_out: (ParamId, ParamId),
}

enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Fan(f32),
    Zeros,
    Ones,
    Normal(f32),
}

/// Creates parameters on first build and resolves them by name afterwards.
enum Builder<'a, R: Rng> {
    Create { store: &'a mut ParamStore, rng: &'a mut R },
    Lookup { store: &'a ParamStore },
}

impl<R: Rng> Builder<'_, R> {
    fn p(&mut self, name: String, shape: &[usize], fan_in: usize, init: Init, group: usize) -> Result<ParamId> {
        match self {
            Builder::Create { store, rng } => {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Fan(gain) => {
                        let d = Normal::new(0.0, gain / (fan_in as f32).sqrt()).expect("finite std");
                        (0..n).map(|_| d.sample(*rng)).collect()
                    }
                    Init::Normal(std) => {
                        let d = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| d.sample(*rng)).collect()
                    }
                };
                Ok(store.add(name, Tensor::new(shape, data), group))
            }
            Builder::Lookup { store } => {
                let id = store.find(&name).ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
                if store.value(id).shape() != shape {
                    return Err(Error::shape("checkpoint parameter shape", format!("{shape:?}"), format!("{:?}", store.value(id).shape())));
                }
                Ok(id)
            }
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.p(format!("{name}.gamma"), &[c], 1, Init::Ones, GROUP_REST)?,
            beta: self.p(format!("{name}.beta"), &[c], 1, Init::Zeros, GROUP_REST)?,
        })
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, init: Init) -> Result<(ParamId, ParamId)> {
        Ok((
            self.p(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, init, GROUP_REST)?,
            self.p(format!("{name}.b"), &[cout], 1, Init::Zeros, GROUP_REST)?,
        ))
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, init: Init) -> Result<(ParamId, ParamId)> {
        Ok((
            self.p(format!("{name}.w"), &[cin, cout], cin, init, GROUP_REST)?,
            self.p(format!("{name}.b"), &[cout], 1, Init::Zeros, GROUP_REST)?,
        ))
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> Result<ResBlock> {
        Ok(ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin)?,
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, Init::Fan(1.0))?,
            temb: self.linear(&format!("{name}.temb"), temb, cout, Init::Fan(1.0))?,
            norm2: self.norm(&format!("{name}.norm2"), cout)?,
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, Init::Fan(0.5))?,
            skip: if cin != cout {
                Some(self.p(format!("{name}.skip.w"), &[cout, cin, 1, 1], cin, Init::Fan(1.0), GROUP_REST)?)
            } else {
                None
            },
        })
    }

    fn attn(&mut self, name: &str, c: usize, token_dim: usize) -> Result<AttnStage> {
        let w = |b: &mut Self, n: &str, cin: usize| b.p(format!("{name}.{n}"), &[cin, c], cin, Init::Fan(1.0), GROUP_REST);
        Ok(AttnStage {
            attn: SelfAttn {
                norm: self.norm(&format!("{name}.attn.norm"), c)?,
                qkv: [w(self, "attn.q", c)?, w(self, "attn.k", c)?, w(self, "attn.v", c)?],
                out: self.linear(&format!("{name}.attn.out"), c, c, Init::Zeros)?,
            },
            cross: CrossAttn {
                norm: self.norm(&format!("{name}.cross.norm"), c)?,
                q: w(self, "cross.q", c)?,
                kv: [w(self, "cross.k", token_dim)?, w(self, "cross.v", token_dim)?],
                out: self.linear(&format!("{name}.cross.out"), c, c, Init::Zeros)?,
            },
        })
    }

    fn layout(&mut self, cfg: &DenoiserConfig) -> Result<Layout> {
        let [c0, c1, c2] = cfg.widths;
        let (te, td) = (cfg.temb_dim, cfg.token_dim);
        Ok(Layout {
            temb1: self.linear("temb.fc1", te, te, Init::Fan(1.0))?,
            temb2: self.linear("temb.fc2", te, te, Init::Fan(1.0))?,
            plane_emb: self.p("plane_emb".into(), &[PSEUDO_IMAGES, te], 1, Init::Normal(0.5), GROUP_PLANE)?,
            token_emb: self.p("token_emb".into(), &[VOCAB_SIZE, td], 1, Init::Normal(1.0), GROUP_REST)?,
            conv_in: self.conv("conv_in", IMAGE_CHANNELS, c0, 3, Init::Fan(1.0))?,
            down: [self.res("down0", c0, c0, te)?, self.res("down1", c0, c1, te)?, self.res("down2", c1, c2, te)?],
            down_attn: [self.attn("down1", c1, td)?, self.attn("down2", c2, td)?],
            downsample: [self.conv("downsample0", c0, c0, 3, Init::Fan(1.0))?, self.conv("downsample1", c1, c1, 3, Init::Fan(1.0))?],
            mid: self.res("mid", c2, c2, te)?,
            mid_attn: self.attn("mid", c2, td)?,
            up: [self.res("up0", c1 + c0, c0, te)?, self.res("up1", c2 + c1, c1, te)?, self.res("up2", c2 + c2, c2, te)?],
            up_attn: [self.attn("up1", c1, td)?, self.attn("up2", c2, td)?],
            upsample: [self.conv("upsample1", c1, c1, 3, Init::Fan(1.0))?, self.conv("upsample2", c2, c2, 3, Init::Fan(1.0))?],
            out_norm: self.norm("out.norm", c0)?,
            conv_out: self.conv("conv_out", c0, IMAGE_CHANNELS, 3, Init::Zeros)?,
        })
    }
}

pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl Clone for Denoiser {
    fn clone(&self) -> Self {
        Self::from_params(self.config, self.params.clone()).expect("layout of an existing model")
    }
}

/// Per-call options that differ between batch kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Routing {
    /// Images per attention sequence.
    pub attention_group: usize,
    pub plane_embeddings: bool,
}

impl From<BatchKind> for Routing {
    fn from(kind: BatchKind) -> Self {
        match kind {
            BatchKind::Triplane => Routing { attention_group: PSEUDO_IMAGES, plane_embeddings: true },
            BatchKind::Image2D => Routing { attention_group: 1, plane_embeddings: false },
        }
    }
}

/// Sinusoidal embedding of the timestep, `[sin(t ω_k), cos(t ω_k)]`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let (s, c) = (t as f64 * freq).sin_cos();
        out[k] = s as f32;
        out[half + k] = c as f32;
    }
    out
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Builder::Create { store: &mut params, rng }.layout(&config)?;
        Ok(Self { config, params, layout })
    }

    /// Rebinds a parameter store, e.g. one read from a checkpoint.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Builder::<rand_chacha::ChaCha8Rng>::Lookup { store: &params }.layout(&config)?;
        Ok(Self { config, params, layout })
    }

    /// Records the network on `g`. `z` is `[N, 3, H, W]`; `t` holds one
    /// timestep per image and `captions` one token sequence per item.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var, t: &[usize], captions: &[CaptionTokens], routing: Routing) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        let r = self.config.resolution;
        if shape.len() != 4 || shape[1] != IMAGE_CHANNELS || shape[2] != r || shape[3] != r {
            return Err(Error::shape("denoiser input", format!("[N, 3, {r}, {r}]"), format!("{shape:?}")));
        }
        let n = shape[0];
        let group = routing.attention_group;
        if n == 0 || !n.is_multiple_of(group) || t.len() != n || captions.len() * group != n {
            return Err(Error::shape(
                "denoiser batch",
                format!("{} images for {} items of {group}", captions.len() * group, captions.len()),
                format!("{n} images, {} timesteps", t.len()),
            ));
        }
        let l = &self.layout;
        let cfg = &self.config;

        let mut sin = Vec::with_capacity(n * cfg.temb_dim);
        for &ti in t {
            sin.extend(timestep_embedding(ti, cfg.temb_dim));
        }
        let sin = g.input(Tensor::new(&[n, cfg.temb_dim], sin));
        let h = linear(g, sin, l.temb1);
        let h = g.silu(h);
        let mut temb = linear(g, h, l.temb2);
        if routing.plane_embeddings {
            let table = g.param(l.plane_emb);
            let ids: Vec<usize> = (0..n).map(|i| i % group).collect();
            let pe = g.gather(table, &ids);
            temb = g.add(temb, pe);
        }
        let temb = g.silu(temb);

        let ids: Vec<usize> = captions.iter().flat_map(|c| c.0).collect();
        let mask: Vec<bool> = captions.iter().flat_map(|c| c.key_mask()).collect();
        let table = g.param(l.token_emb);
        let ctx = g.gather(table, &ids);
        let ctx = Context { ctx, mask: &mask, items: captions.len() };

        let x = conv(g, z, l.conv_in, 1);
        let h0 = self.res(g, x, temb, &l.down[0]);
        let x = conv(g, h0, l.downsample[0], 2);
        let h1 = self.res(g, x, temb, &l.down[1]);
        let h1 = self.attn_stage(g, h1, &l.down_attn[0], group, &ctx);
        let x = conv(g, h1, l.downsample[1], 2);
        let h2 = self.res(g, x, temb, &l.down[2]);
        let h2 = self.attn_stage(g, h2, &l.down_attn[1], group, &ctx);

        let m = self.res(g, h2, temb, &l.mid);
        let m = self.attn_stage(g, m, &l.mid_attn, group, &ctx);

        let x = g.concat(m, h2);
        let x = self.res(g, x, temb, &l.up[2]);
        let x = self.attn_stage(g, x, &l.up_attn[1], group, &ctx);
        let x = g.upsample2x(x);
        let x = conv(g, x, l.upsample[1], 1);
        let x = g.concat(x, h1);
        let x = self.res(g, x, temb, &l.up[1]);
        let x = self.attn_stage(g, x, &l.up_attn[0], group, &ctx);
        let x = g.upsample2x(x);
        let x = conv(g, x, l.upsample[0], 1);
        let x = g.concat(x, h0);
        let x = self.res(g, x, temb, &l.up[0]);

        let x = norm(g, x, &l.out_norm, cfg.groups);
        let x = g.silu(x);
        Ok(conv(g, x, l.conv_out, 1))
    }

    /// Forward pass without gradient bookkeeping beyond the tape.
    pub fn predict(&self, z: Tensor, t: &[usize], captions: &[CaptionTokens], routing: Routing) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let zv = g.input(z);
        let out = self.forward(&mut g, zv, t, captions, routing)?;
        Ok(g.value(out).clone())
    }

    fn res(&self, g: &mut Graph<'_>, x: Var, temb: Var, b: &ResBlock) -> Var {
        let groups = self.config.groups;
        let h = norm(g, x, &b.norm1, groups);
        let h = g.silu(h);
        let h = conv(g, h, b.conv1, 1);
        let e = linear(g, temb, b.temb);
        let h = g.add_channel(h, e);
        let h = norm(g, h, &b.norm2, groups);
        let h = g.silu(h);
        let h = conv(g, h, b.conv2, 1);
        let skip = match b.skip {
            Some(w) => {
                let w = g.param(w);
                g.conv2d(x, w, None, 1)
            }
            None => x,
        };
        g.add(h, skip)
    }

    fn attn_stage(&self, g: &mut Graph<'_>, x: Var, s: &AttnStage, group: usize, ctx: &Context<'_>) -> Var {
        let x = self.self_attn(g, x, &s.attn, group);
        self.cross_attn(g, x, &s.cross, group, ctx)
    }

    fn self_attn(&self, g: &mut Graph<'_>, x: Var, a: &SelfAttn, group: usize) -> Var {
        let [_, c, h, w] = dims(g, x);
        let hn = norm(g, x, &a.norm, self.config.groups);
        let tok = g.to_tokens(hn, group);
        let (b, len) = (g.shape(tok)[0], g.shape(tok)[1]);
        let flat = g.reshape(tok, &[b * len, c]);
        let [q, k, v] = a.qkv.map(|id| {
            let w = g.param(id);
            let p = g.linear(flat, w, None);
            g.reshape(p, &[b, len, c])
        });
        let o = g.attention(q, k, v, self.config.heads, None);
        let o = g.reshape(o, &[b * len, c]);
        let o = linear(g, o, a.out);
        let o = g.reshape(o, &[b, len, c]);
        let o = g.from_tokens(o, group, h, w);
        g.add(x, o)
    }

    fn cross_attn(&self, g: &mut Graph<'_>, x: Var, a: &CrossAttn, group: usize, ctx: &Context<'_>) -> Var {
        let [_, c, h, w] = dims(g, x);
        let hn = norm(g, x, &a.norm, self.config.groups);
        let tok = g.to_tokens(hn, group);
        let (b, len) = (g.shape(tok)[0], g.shape(tok)[1]);
        debug_assert_eq!(b, ctx.items);
        let flat = g.reshape(tok, &[b * len, c]);
        let wq = g.param(a.q);
        let q = g.linear(flat, wq, None);
        let q = g.reshape(q, &[b, len, c]);
        let [k, v] = a.kv.map(|id| {
            let w = g.param(id);
            let p = g.linear(ctx.ctx, w, None);
            g.reshape(p, &[b, MAX_TOKENS, c])
        });
        let o = g.attention(q, k, v, self.config.heads, Some(ctx.mask));
        let o = g.reshape(o, &[b * len, c]);
        let o = linear(g, o, a.out);
        let o = g.reshape(o, &[b, len, c]);
        let o = g.from_tokens(o, group, h, w);
        g.add(x, o)
    }
}

struct Context<'m> {
    ctx: Var,
    mask: &'m [bool],
    items: usize,
}

fn dims(g: &Graph<'_>, x: Var) -> [usize; 4] {
    let s = g.shape(x);
    [s[0], s[1], s[2], s[3]]
}

fn norm(g: &mut Graph<'_>, x: Var, n: &Norm, groups: usize) -> Var {
    let (gm, bt) = (g.param(n.gamma), g.param(n.beta));
    g.group_norm(x, gm, bt, groups)
}

fn conv(g: &mut Graph<'_>, x: Var, (w, b): (ParamId, ParamId), stride: usize) -> Var {
    let (w, b) = (g.param(w), g.param(b));
    g.conv2d(x, w, Some(b), stride)
}

fn linear(g: &mut Graph<'_>, x: Var, (w, b): (ParamId, ParamId)) -> Var {
    let (w, b) = (g.param(w), g.param(b));
    g.linear(x, w, Some(b))
}
