//! Loss terms of the fitting objective and their gradients. Every spatial or
//! per-ray sum is a mean, so the weights do not depend on batch size or
//! triplane resolution.

use crate::error::{Error, Result};
use crate::scene::HullMasks;
use crate::triplane::{Plane, TriPlane};

const BCE_EPS: f64 = 1e-6;

fn check_len(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(what, a, b));
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over rays of `‖ĉ − c‖² + λ_L1 ‖ĉ − c‖₁`.
pub fn loss_color(pred: &[[f64; 3]], target: &[[f64; 3]], lambda_l1: f64) -> Result<f64> {
    check_len("color batch", target.len(), pred.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|k| (p[k] - t[k]).powi(2) + lambda_l1 * (p[k] - t[k]).abs()).sum::<f64>())
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn loss_color_grad(pred: &[[f64; 3]], target: &[[f64; 3]], lambda_l1: f64) -> Vec<[f64; 3]> {
    let inv = 1.0 / pred.len().max(1) as f64;
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let mut g = [0.0; 3];
            for k in 0..3 {
                let d = p[k] - t[k];
                g[k] = (2.0 * d + lambda_l1 * sign(d)) * inv;
            }
            g
        })
        .collect()
}

fn check_mask(pred: &[f64], target: &[f64]) -> Result<()> {
    check_len("mask batch", target.len(), pred.len())?;
    if let Some(p) = pred.iter().find(|p| !(-1e-9..=1.0 + 1e-9).contains(*p)) {
        return Err(Error::OutOfRange { what: "predicted mask", detail: format!("{p} outside [0, 1]") });
    }
    if let Some(m) = target.iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(Error::OutOfRange { what: "target mask", detail: format!("{m} not in {{0, 1}}") });
    }
    Ok(())
}

/// Mean binary cross-entropy with the prediction clamped to `[1e-6, 1 − 1e-6]`.
pub fn loss_mask(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_mask(pred, target)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &m)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(m * p.ln() + (1.0 - m) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of the unclamped cross-entropy. Inside the clamp range this is the
/// exact derivative; below it the log still cancels the exponential tail of the
/// transmittance, so rays through nearly empty space keep a usable signal.
pub fn loss_mask_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    let inv = 1.0 / pred.len().max(1) as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &m)| {
            let p = p.clamp(f64::MIN_POSITIVE, 1.0);
            let q = (1.0 - p).max(1e-16);
            (-m / p + (1.0 - m) / q) * inv
        })
        .collect()
}

/// Mean over rays of `M · |D̂ − D|`.
pub fn loss_depth(pred: &[f64], target: &[f64], mask: &[f64]) -> Result<f64> {
    check_len("depth batch", target.len(), pred.len())?;
    check_len("depth mask", pred.len(), mask.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(target).zip(mask).map(|((p, t), m)| if *m > 0.0 { m * (p - t).abs() } else { 0.0 }).sum();
    Ok(sum / pred.len() as f64)
}

pub fn loss_depth_grad(pred: &[f64], target: &[f64], mask: &[f64]) -> Vec<f64> {
    let inv = 1.0 / pred.len().max(1) as f64;
    pred.iter().zip(target).zip(mask).map(|((p, t), m)| if *m > 0.0 { m * sign(p - t) * inv } else { 0.0 }).collect()
}

fn tv_pairs(tp: &TriPlane) -> usize {
    let r = tp.resolution();
    3 * tp.channels() * 2 * r * (r - 1)
}

/// `(l2, tv)`: mean squared texel value, and mean absolute difference over all
/// horizontally and vertically adjacent texel pairs of every channel and plane.
pub fn loss_reg(tp: &TriPlane) -> (f64, f64) {
    let r = tp.resolution();
    let l2 = tp.values().map(|v| v * v).sum::<f64>() / tp.len() as f64;
    let mut tv = 0.0;
    for plane in Plane::ALL {
        for ch in tp.plane(plane).chunks(r * r) {
            for row in 0..r {
                for col in 0..r {
                    let v = ch[row * r + col];
                    if col + 1 < r {
                        tv += (ch[row * r + col + 1] - v).abs();
                    }
                    if row + 1 < r {
                        tv += (ch[(row + 1) * r + col] - v).abs();
                    }
                }
            }
        }
    }
    (l2, tv / tv_pairs(tp) as f64)
}

/// Adds `w_l2 ∇l2 + w_tv ∇tv` to `grad` (flat triplane order).
pub fn loss_reg_grad(tp: &TriPlane, w_l2: f64, w_tv: f64, grad: &mut [f64]) {
    let r = tp.resolution();
    let k2 = 2.0 * w_l2 / tp.len() as f64;
    for (g, v) in grad.iter_mut().zip(tp.values()) {
        *g += k2 * v;
    }
    if w_tv == 0.0 {
        return;
    }
    let kt = w_tv / tv_pairs(tp) as f64;
    let plane_len = tp.plane_len();
    for (pi, plane) in Plane::ALL.into_iter().enumerate() {
        let values = tp.plane(plane);
        let g = &mut grad[pi * plane_len..(pi + 1) * plane_len];
        for (ch, gch) in values.chunks(r * r).zip(g.chunks_mut(r * r)) {
            for row in 0..r {
                for col in 0..r {
                    let i = row * r + col;
                    if col + 1 < r {
                        let s = kt * sign(ch[i + 1] - ch[i]);
                        gch[i + 1] += s;
                        gch[i] -= s;
                    }
                    if row + 1 < r {
                        let s = kt * sign(ch[i + r] - ch[i]);
                        gch[i + r] += s;
                        gch[i] -= s;
                    }
                }
            }
        }
    }
}

fn check_hull(tp: &TriPlane, masks: &HullMasks) -> Result<()> {
    check_len("hull mask resolution", tp.resolution(), masks.resolution)
}

/// Mean over texels and channels of `(1 − O)·|F|` per plane, averaged over the planes.
pub fn loss_hull(tp: &TriPlane, masks: &HullMasks) -> Result<f64> {
    check_hull(tp, masks)?;
    let rr = tp.resolution() * tp.resolution();
    let mut sum = 0.0;
    for plane in Plane::ALL {
        let o = masks.get(plane);
        for ch in tp.plane(plane).chunks(rr) {
            sum += ch.iter().zip(o).filter(|(_, &o)| o == 0).map(|(v, _)| v.abs()).sum::<f64>();
        }
    }
    Ok(sum / tp.len() as f64)
}

pub fn loss_hull_grad(tp: &TriPlane, masks: &HullMasks, weight: f64, grad: &mut [f64]) -> Result<()> {
    check_hull(tp, masks)?;
    let rr = tp.resolution() * tp.resolution();
    let k = weight / tp.len() as f64;
    let plane_len = tp.plane_len();
    for (pi, plane) in Plane::ALL.into_iter().enumerate() {
        let o = masks.get(plane);
        let g = &mut grad[pi * plane_len..(pi + 1) * plane_len];
        for (ch, gch) in tp.plane(plane).chunks(rr).zip(g.chunks_mut(rr)) {
            for ((v, gv), &o) in ch.iter().zip(gch.iter_mut()).zip(o) {
                if o == 0 {
                    *gv += k * sign(*v);
                }
            }
        }
    }
    Ok(())
}

/// Loss weights; the color term has unit weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub mask: f64,
    pub depth: f64,
    pub l2: f64,
    pub tv: f64,
    pub hull: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 0.2, mask: 0.1, depth: 0.5, l2: 0.05, tv: 0.05, hull: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.mask, self.depth, self.l2, self.tv, self.hull];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::OutOfRange { what: "loss weight", detail: format!("{self:?}") });
        }
        Ok(())
    }
}

/// Unweighted loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossComponents {
    /// Includes its own L1 part.
    pub color: f64,
    pub mask: f64,
    pub depth: f64,
    pub l2: f64,
    pub tv: f64,
    pub hull: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(self, w)
    }

    pub fn add_scaled(&mut self, other: &LossComponents, s: f64) {
        self.color += s * other.color;
        self.mask += s * other.mask;
        self.depth += s * other.depth;
        self.l2 += s * other.l2;
        self.tv += s * other.tv;
        self.hull += s * other.hull;
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.color + w.mask * c.mask + w.depth * c.depth + w.l2 * c.l2 + w.tv * c.tv + w.hull * c.hull
}
