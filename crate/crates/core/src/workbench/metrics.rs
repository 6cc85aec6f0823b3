//! Image-space quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workbench::retrieval::{Retrieval, RetrievalStats};

/// Reported when two images are identical.
pub const PSNR_SENTINEL: f64 = 99.0;

/// `10 log10(1 / MSE)` for images with values in `[0, 1]`.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("image size", a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(PSNR_SENTINEL);
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_SENTINEL))
}

/// Intersection over union of a soft mask thresholded at 0.5 and a binary mask.
/// Two empty masks agree perfectly.
pub fn mask_iou(pred: &[f64], target: &[u8]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("mask size", target.len(), pred.len()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let p = p >= 0.5;
        let t = t != 0;
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean absolute depth error over pixels where the target mask is set.
pub fn depth_mae(pred: &[f64], target: &[f32], mask: &[u8]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::shape("depth size", target.len(), pred.len()));
    }
    let (sum, n) = pred
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, &m)| m != 0)
        .fold((0.0, 0usize), |(s, n), ((p, t), _)| (s + (p - *t as f64).abs(), n + 1));
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Fitting quality on held-out views.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub iou: f64,
    pub depth_mae: f64,
}

/// Per-triplane evaluation: view metrics when held-out views exist, and the
/// oracle retrieval of its caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub file: String,
    pub caption: String,
    pub views: Option<ViewMetrics>,
    pub retrieval: Retrieval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: Vec<MetricsEntry>,
    /// Mean over the entries with view metrics.
    pub mean_views: Option<ViewMetrics>,
    pub retrieval: RetrievalStats,
}

impl MetricsReport {
    pub fn new(entries: Vec<MetricsEntry>) -> Self {
        let with_views: Vec<ViewMetrics> = entries.iter().filter_map(|e| e.views).collect();
        let mean_views = (!with_views.is_empty()).then(|| {
            let n = with_views.len() as f64;
            ViewMetrics {
                psnr: with_views.iter().map(|v| v.psnr).sum::<f64>() / n,
                iou: with_views.iter().map(|v| v.iou).sum::<f64>() / n,
                depth_mae: with_views.iter().map(|v| v.depth_mae).sum::<f64>() / n,
            }
        });
        let retrieval = RetrievalStats::from_retrievals(&entries.iter().map(|e| e.retrieval).collect::<Vec<_>>());
        Self { entries, mean_views, retrieval }
    }
}
