//! The shared, position-agnostic MLP decoder.
//!
//! Four dense layers `3C → 32 → 32 → 32 → 4` with ReLU between them. The
//! first three outputs go through a sigmoid (RGB in `[0, 1]`), the last through
//! a softplus (density in `[0, ∞)`). The decoder sees only the triplane
//! feature, never the point coordinates.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::dgemm;

pub const DECODER_HIDDEN: usize = 32;
pub const DECODER_LAYERS: usize = 4;
const OUT: usize = 4;

/// Flat parameter vector; layer `l` stores `W_l` as `in × out` row-major followed by `b_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    dims: Vec<usize>,
    params: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Activations of a batched forward pass, kept for the backward pass.
pub struct MlpCache {
    pub n: usize,
    /// Input and every post-activation hidden layer, `n × width` each.
    acts: Vec<Vec<f64>>,
    /// Raw (pre-head) outputs, `n × 4`.
    pub raw: Vec<f64>,
}

impl MlpCache {
    pub fn rgb(&self, i: usize) -> [f64; 3] {
        let r = &self.raw[i * OUT..i * OUT + 3];
        [sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2])]
    }

    pub fn density(&self, i: usize) -> f64 {
        softplus(self.raw[i * OUT + 3])
    }
}

impl DecoderParams {
    pub fn zeros(feature_len: usize) -> Self {
        let dims = vec![feature_len, DECODER_HIDDEN, DECODER_HIDDEN, DECODER_HIDDEN, OUT];
        let n = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self { dims, params: vec![0.0; n] }
    }

    /// He-normal weights, zero biases except a negative density bias so that
    /// training starts from nearly empty space.
    pub fn init(feature_len: usize, rng: &mut impl Rng) -> Self {
        let mut d = Self::zeros(feature_len);
        for l in 0..DECODER_LAYERS {
            let (fan_in, _) = d.layer_dims(l);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let (w, _) = d.layer_range(l);
            for v in &mut d.params[w] {
                *v = normal.sample(rng);
            }
        }
        let (_, b) = d.layer_range(DECODER_LAYERS - 1);
        d.params[b.end - 1] = -2.0;
        d
    }

    pub fn from_flat(feature_len: usize, params: Vec<f64>) -> Result<Self> {
        let mut d = Self::zeros(feature_len);
        if params.len() != d.params.len() {
            return Err(Error::shape("decoder parameter count", d.params.len(), params.len()));
        }
        d.params = params;
        Ok(d)
    }

    pub fn feature_len(&self) -> usize {
        self.dims[0]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    fn layer_dims(&self, l: usize) -> (usize, usize) {
        (self.dims[l], self.dims[l + 1])
    }

    /// Index ranges of `(W_l, b_l)` in the flat vector.
    pub fn layer_range(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut off = 0;
        for k in 0..l {
            let (i, o) = self.layer_dims(k);
            off += i * o + o;
        }
        let (i, o) = self.layer_dims(l);
        (off..off + i * o, off + i * o..off + i * o + o)
    }

    pub fn quantize_f32(&mut self) {
        self.params.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }

    /// Batched forward over `n` features stored row-major in `x`.
    pub fn forward_batch(&self, x: Vec<f64>, n: usize) -> MlpCache {
        debug_assert_eq!(x.len(), n * self.dims[0]);
        let mut acts = vec![x];
        let mut raw = Vec::new();
        for l in 0..DECODER_LAYERS {
            let (fi, fo) = self.layer_dims(l);
            let (wr, br) = self.layer_range(l);
            let mut z = vec![0.0; n * fo];
            let b = &self.params[br];
            for row in z.chunks_mut(fo) {
                row.copy_from_slice(b);
            }
            dgemm(n, fi, fo, acts.last().expect("input"), (fi, 1), &self.params[wr], (fo, 1), &mut z, fo, true);
            if l + 1 < DECODER_LAYERS {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                acts.push(z);
            } else {
                raw = z;
            }
        }
        MlpCache { n, acts, raw }
    }

    /// Backward pass from raw-output gradients `d_raw` (`n × 4`). Parameter
    /// gradients accumulate into `grad`; returns the input gradient when requested.
    pub fn backward_batch(&self, cache: &MlpCache, d_raw: Vec<f64>, grad: &mut [f64], want_input: bool) -> Option<Vec<f64>> {
        let n = cache.n;
        let mut dz = d_raw;
        for l in (0..DECODER_LAYERS).rev() {
            let (fi, fo) = self.layer_dims(l);
            let (wr, br) = self.layer_range(l);
            let a = &cache.acts[l];
            // dW += aᵀ · dz
            dgemm(fi, n, fo, a, (1, fi), &dz, (fo, 1), &mut grad[wr.clone()], fo, true);
            let db = &mut grad[br];
            for row in dz.chunks(fo) {
                db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
            }
            if l == 0 && !want_input {
                return None;
            }
            // da = dz · Wᵀ
            let mut da = vec![0.0; n * fi];
            dgemm(n, fo, fi, &dz, (fo, 1), &self.params[wr], (1, fo), &mut da, fi, false);
            if l == 0 {
                return Some(da);
            }
            // ReLU mask from the stored post-activation.
            for (d, &act) in da.iter_mut().zip(a) {
                if act <= 0.0 {
                    *d = 0.0;
                }
            }
            dz = da;
        }
        unreachable!()
    }
}

/// Decodes one feature into `(rgb, density)`.
pub fn decode(dec: &DecoderParams, feat: &[f64]) -> Result<([f64; 3], f64)> {
    if feat.len() != dec.feature_len() {
        return Err(Error::shape("decoder input", dec.feature_len(), feat.len()));
    }
    if let Some(i) = feat.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "decoder input", location: format!("component {i}") });
    }
    let cache = dec.forward_batch(feat.to_vec(), 1);
    Ok((cache.rgb(0), cache.density(0)))
}

/// Derivatives of the heads with respect to the raw outputs.
pub(crate) fn head_grads(raw: &[f64]) -> ([f64; 3], f64) {
    let s = [sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])];
    ([s[0] * (1.0 - s[0]), s[1] * (1.0 - s[1]), s[2] * (1.0 - s[2])], sigmoid(raw[3]))
}
