//! Triplane storage, pseudo-image packing and bilinear feature lookup.
//!
//! A triplane holds three `C×H×W` feature maps on the axis-aligned planes
//! `xy`, `xz` and `yz`. A point `p` reads each plane at its projection and the
//! three `C`-vectors are concatenated (in `xy, xz, yz` order) into one feature.
//!
//! Axis convention (frozen in the file format): on every plane the first listed
//! axis runs along columns and the second along rows. Texel centers sit at
//! integer coordinates and `[-0.5, 0.5]` maps affinely onto `[0, res - 1]`, so
//! the box corner `(-0.5, -0.5, -0.5)` lands on texel `(0, 0)` of all planes.
//! Lookups outside the box clamp to the edge texels.

mod decoder;

pub(crate) use decoder::head_grads as decoder_heads;
pub use decoder::{decode, DecoderParams, MlpCache, DECODER_HIDDEN, DECODER_LAYERS};

use glam::{DVec2, DVec3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::BOX_HALF;

/// Default channel count: two 3-channel pseudo-images per plane.
pub const DEFAULT_CHANNELS: usize = 6;
/// Pseudo-images per triplane at the default channel count.
pub const PSEUDO_IMAGES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Plane {
    Xy,
    Xz,
    Yz,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Xy, Plane::Xz, Plane::Yz];

    /// Scene axes `(column axis, row axis)`.
    pub fn axes(self) -> (usize, usize) {
        match self {
            Plane::Xy => (0, 1),
            Plane::Xz => (0, 2),
            Plane::Yz => (1, 2),
        }
    }

    /// The axis the plane projects away.
    pub fn dropped_axis(self) -> usize {
        match self {
            Plane::Xy => 2,
            Plane::Xz => 1,
            Plane::Yz => 0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Continuous texel coordinate; integer values are texel centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TexelCoord {
    pub row: f64,
    pub col: f64,
}

/// Projections of `p` on the `xy`, `xz`, `yz` planes in scene units, each as
/// `(column-axis, row-axis)` coordinates.
pub fn project(p: DVec3) -> [DVec2; 3] {
    Plane::ALL.map(|pl| {
        let (a, b) = pl.axes();
        DVec2::new(p[a], p[b])
    })
}

/// Affine map from plane coordinates in `[-0.5, 0.5]²` to texel coordinates.
pub fn to_texel(uv: DVec2, resolution: usize) -> TexelCoord {
    let s = (resolution - 1) as f64;
    TexelCoord { row: (uv.y + BOX_HALF) * s, col: (uv.x + BOX_HALF) * s }
}

/// The four texels (flat `row·res + col` offsets) and weights of a clamped
/// bilinear lookup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub offsets: [u32; 4],
    pub weights: [f64; 4],
}

impl Footprint {
    pub fn new(coord: TexelCoord, resolution: usize) -> Self {
        let max = (resolution - 1) as f64;
        let r = coord.row.clamp(0.0, max);
        let c = coord.col.clamp(0.0, max);
        let r0 = (r.floor() as usize).min(resolution - 2);
        let c0 = (c.floor() as usize).min(resolution - 2);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        let base = (r0 * resolution + c0) as u32;
        let res = resolution as u32;
        Self {
            offsets: [base, base + 1, base + res, base + res + 1],
            weights: [(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc],
        }
    }
}

/// Bilinear lookup of a `C×res×res` plane; returns the `C`-vector.
pub fn sample_plane(plane: &[f64], channels: usize, resolution: usize, coord: TexelCoord) -> Vec<f64> {
    let fp = Footprint::new(coord, resolution);
    let stride = resolution * resolution;
    (0..channels)
        .map(|c| {
            let ch = &plane[c * stride..(c + 1) * stride];
            fp.offsets.iter().zip(fp.weights).map(|(&o, w)| ch[o as usize] * w).sum()
        })
        .collect()
}

/// Derivatives of a single-channel bilinear lookup with respect to the
/// texel coordinate, `(d/d row, d/d col)`. Zero along clamped axes.
pub fn sample_plane_grad_coord(plane: &[f64], resolution: usize, coord: TexelCoord) -> (f64, f64) {
    let max = (resolution - 1) as f64;
    let fp = Footprint::new(coord, resolution);
    let v: Vec<f64> = fp.offsets.iter().map(|&o| plane[o as usize]).collect();
    let r = coord.row.clamp(0.0, max);
    let c = coord.col.clamp(0.0, max);
    let fr = r - r.floor().min(max - 1.0);
    let fc = c - c.floor().min(max - 1.0);
    let inside = |x: f64| (0.0..=max).contains(&x);
    let d_row = ((1.0 - fc) * (v[2] - v[0]) + fc * (v[3] - v[1])) * inside(coord.row) as u8 as f64;
    let d_col = ((1.0 - fr) * (v[1] - v[0]) + fr * (v[3] - v[2])) * inside(coord.col) as u8 as f64;
    (d_row, d_col)
}

/// Three `C×res×res` feature maps, each stored channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlane {
    resolution: usize,
    channels: usize,
    planes: [Vec<f64>; 3],
}

impl TriPlane {
    pub fn zeros(resolution: usize, channels: usize) -> Self {
        assert!(resolution >= 2, "triplane resolution must be at least 2");
        let n = channels * resolution * resolution;
        Self { resolution, channels, planes: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }

    pub fn filled(resolution: usize, channels: usize, value: f64) -> Self {
        let mut tp = Self::zeros(resolution, channels);
        tp.values_mut().for_each(|v| *v = value);
        tp
    }

    pub fn random_normal(resolution: usize, channels: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut tp = Self::zeros(resolution, channels);
        tp.values_mut().for_each(|v| *v = normal.sample(rng));
        tp
    }

    pub fn from_planes(resolution: usize, channels: usize, planes: [Vec<f64>; 3]) -> Result<Self> {
        let n = channels * resolution * resolution;
        if resolution < 2 {
            return Err(Error::OutOfRange { what: "triplane resolution", detail: resolution.to_string() });
        }
        for p in &planes {
            if p.len() != n {
                return Err(Error::shape("plane length", n, p.len()));
            }
        }
        Ok(Self { resolution, channels, planes })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn feature_len(&self) -> usize {
        3 * self.channels
    }

    pub fn plane(&self, p: Plane) -> &[f64] {
        &self.planes[p.index()]
    }

    pub fn plane_mut(&mut self, p: Plane) -> &mut [f64] {
        &mut self.planes[p.index()]
    }

    /// Number of scalars per plane.
    pub fn plane_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    pub fn len(&self) -> usize {
        3 * self.plane_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All values in `xy, xz, yz` order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.planes.iter().flatten()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.planes.iter_mut().flatten()
    }

    /// Value at flat index `i` over the `xy, xz, yz` concatenation.
    pub fn get_flat(&self, i: usize) -> f64 {
        let n = self.plane_len();
        self.planes[i / n][i % n]
    }

    pub fn set_flat(&mut self, i: usize, v: f64) {
        let n = self.plane_len();
        self.planes[i / n][i % n] = v;
    }

    /// Bilinear footprints of `p` on the three planes.
    pub fn footprints(&self, p: DVec3) -> [Footprint; 3] {
        let uv = project(p);
        [0, 1, 2].map(|k| Footprint::new(to_texel(uv[k], self.resolution), self.resolution))
    }

    /// Concatenated `3C` feature of `p` written into `out`.
    pub fn feature_into(&self, p: DVec3, out: &mut [f64]) {
        let fps = self.footprints(p);
        self.feature_from_footprints(&fps, out);
    }

    pub fn feature_from_footprints(&self, fps: &[Footprint; 3], out: &mut [f64]) {
        let c = self.channels;
        let stride = self.resolution * self.resolution;
        for (k, fp) in fps.iter().enumerate() {
            let plane = &self.planes[k];
            for ch in 0..c {
                let base = ch * stride;
                out[k * c + ch] = fp.offsets.iter().zip(fp.weights).map(|(&o, w)| plane[base + o as usize] * w).sum();
            }
        }
    }

    pub fn feature(&self, p: DVec3) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_len()];
        self.feature_into(p, &mut out);
        out
    }

    /// Elementwise clamp into `[lo, hi]`; returns the fraction of values that were already inside.
    pub fn clamp(&mut self, lo: f64, hi: f64) -> f64 {
        let total = self.len() as f64;
        let mut inside = 0usize;
        for v in self.values_mut() {
            if (lo..=hi).contains(v) {
                inside += 1;
            }
            *v = v.clamp(lo, hi);
        }
        inside as f64 / total
    }

    /// Rounds every value to the nearest f32 so on-disk storage is lossless.
    pub fn quantize_f32(&mut self) {
        self.values_mut().for_each(|v| *v = *v as f32 as f64);
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Packs into six 3-channel pseudo-images in canonical order:
    /// `xy[0..3], xy[3..6], xz[0..3], xz[3..6], yz[0..3], yz[3..6]`.
    pub fn pack(&self) -> Result<PseudoImageStack> {
        if self.channels != DEFAULT_CHANNELS {
            return Err(Error::shape("triplane channels for packing", DEFAULT_CHANNELS, self.channels));
        }
        let img = 3 * self.resolution * self.resolution;
        let images = self
            .planes
            .iter()
            .flat_map(|p| [p[..img].to_vec(), p[img..].to_vec()])
            .collect();
        Ok(PseudoImageStack { resolution: self.resolution, images })
    }
}

/// Six `3×H×W` pseudo-images in canonical order (see [`TriPlane::pack`]).
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoImageStack {
    pub resolution: usize,
    pub images: Vec<Vec<f64>>,
}

impl PseudoImageStack {
    pub fn unpack(&self) -> Result<TriPlane> {
        if self.images.len() != PSEUDO_IMAGES {
            return Err(Error::shape("pseudo-image count", PSEUDO_IMAGES, self.images.len()));
        }
        let img = 3 * self.resolution * self.resolution;
        if let Some(bad) = self.images.iter().find(|i| i.len() != img) {
            return Err(Error::shape("pseudo-image length", img, bad.len()));
        }
        let plane = |k: usize| [self.images[2 * k].as_slice(), self.images[2 * k + 1].as_slice()].concat();
        TriPlane::from_planes(self.resolution, DEFAULT_CHANNELS, [plane(0), plane(1), plane(2)])
    }

    /// Flattened `[6, 3, H, W]` buffer.
    pub fn to_flat(&self) -> Vec<f64> {
        self.images.concat()
    }

    pub fn from_flat(resolution: usize, flat: &[f64]) -> Result<Self> {
        let img = 3 * resolution * resolution;
        if flat.len() != PSEUDO_IMAGES * img {
            return Err(Error::shape("pseudo-image buffer", PSEUDO_IMAGES * img, flat.len()));
        }
        Ok(Self { resolution, images: flat.chunks(img).map(<[f64]>::to_vec).collect() })
    }
}
