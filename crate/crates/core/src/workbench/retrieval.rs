//! Oracle caption retrieval: ranks captions by color-histogram and silhouette
//! agreement between rendered views and each caption's canonical scene.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Projection, CAMERA_RADIUS, DEFAULT_FOV_Y};
use crate::error::Result;
use crate::scene::{render_oracle_view, Caption, PaletteColor, SceneSpec};
use crate::triplane::{DecoderParams, TriPlane};
use crate::volrend::{render_view, SamplingConfig};

pub const RETRIEVAL_AZIMUTHS_DEG: [f64; 4] = [0.0, 90.0, 180.0, 270.0];
pub const RETRIEVAL_ELEVATION_DEG: f64 = 15.0;
const BINS: usize = PaletteColor::ALL.len();

pub fn retrieval_cameras() -> Vec<CameraPose> {
    RETRIEVAL_AZIMUTHS_DEG
        .iter()
        .map(|&az| {
            CameraPose::orbit(az.to_radians(), RETRIEVAL_ELEVATION_DEG.to_radians(), CAMERA_RADIUS, Projection::Perspective { fov_y: DEFAULT_FOV_Y })
        })
        .collect()
}

/// Silhouette and palette histogram of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSignature {
    pub mask: Vec<bool>,
    pub histogram: [f64; BINS],
}

impl ViewSignature {
    /// `rgb` interleaved in `[0, 1]`; pixels with `coverage ≥ 0.5` count as foreground.
    pub fn new(rgb: &[f64], coverage: &[f64]) -> Self {
        let mask: Vec<bool> = coverage.iter().map(|&m| m >= 0.5).collect();
        let mut histogram = [0.0; BINS];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let c = &rgb[i * 3..i * 3 + 3];
            let a = coverage[i].max(1e-9);
            histogram[nearest_palette([c[0] / a, c[1] / a, c[2] / a])] += 1.0;
        }
        let total: f64 = histogram.iter().sum();
        if total > 0.0 {
            histogram.iter_mut().for_each(|h| *h /= total);
        }
        Self { mask, histogram }
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    /// Histogram intersection times silhouette IoU.
    pub fn score(&self, reference: &ViewSignature) -> f64 {
        let hist: f64 = self.histogram.iter().zip(&reference.histogram).map(|(a, b)| a.min(*b)).sum();
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.mask.iter().zip(&reference.mask) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        hist * iou
    }
}

fn nearest_palette(c: [f64; 3]) -> usize {
    let dist = |p: PaletteColor| p.rgb().iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    (0..BINS).min_by(|&a, &b| dist(PaletteColor::ALL[a]).total_cmp(&dist(PaletteColor::ALL[b]))).expect("non-empty palette")
}

/// Canonical-scene signatures of every candidate caption.
pub struct OracleIndex {
    pub resolution: usize,
    pub captions: Vec<Caption>,
    references: Vec<Vec<ViewSignature>>,
}

impl OracleIndex {
    pub fn new(captions: Vec<Caption>, resolution: usize) -> Result<Self> {
        let cams = retrieval_cameras();
        let references = captions
            .par_iter()
            .map(|c| {
                let spec = SceneSpec::canonical(c);
                cams.iter()
                    .map(|cam| {
                        let v = render_oracle_view(&spec, cam, resolution, resolution)?;
                        let rgb: Vec<f64> = v.rgb.iter().map(|&x| x as f64).collect();
                        let cov: Vec<f64> = v.mask.iter().map(|&m| m as f64).collect();
                        Ok(ViewSignature::new(&rgb, &cov))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { resolution, captions, references })
    }

    /// The full closed caption set.
    pub fn full(resolution: usize) -> Result<Self> {
        Self::new(Caption::enumerate(), resolution)
    }

    /// Renders the four retrieval views of a triplane.
    pub fn signatures(&self, tp: &TriPlane, dec: &DecoderParams, n_samples: usize) -> Result<Vec<ViewSignature>> {
        retrieval_cameras()
            .iter()
            .map(|cam| {
                let v = render_view(tp, dec, cam, self.resolution, self.resolution, &SamplingConfig::eval(n_samples))?;
                Ok(ViewSignature::new(&v.rgb, &v.mask))
            })
            .collect()
    }

    /// Per-candidate scores averaged over the views.
    pub fn scores(&self, views: &[ViewSignature]) -> Vec<f64> {
        self.references
            .iter()
            .map(|refs| views.iter().zip(refs).map(|(v, r)| v.score(r)).sum::<f64>() / views.len().max(1) as f64)
            .collect()
    }

    pub fn retrieve(&self, views: &[ViewSignature], truth: &Caption) -> Retrieval {
        let scores = self.scores(views);
        let degenerate = views.iter().all(ViewSignature::is_empty);
        let n = self.captions.len();
        let Some(ti) = self.captions.iter().position(|c| c == truth) else {
            return Retrieval { rank: n + 1, score: 0.0, degenerate };
        };
        let own = scores[ti];
        // ties count against the true caption, so an uninformative score ranks last
        let rank = if degenerate { n } else { 1 + scores.iter().enumerate().filter(|&(i, &s)| i != ti && s >= own).count() };
        Retrieval { rank, score: own, degenerate }
    }

    pub fn retrieve_triplane(&self, tp: &TriPlane, dec: &DecoderParams, truth: &Caption, n_samples: usize) -> Result<Retrieval> {
        Ok(self.retrieve(&self.signatures(tp, dec, n_samples)?, truth))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    /// 1-based rank of the true caption.
    pub rank: usize,
    pub score: f64,
    /// No view has any foreground.
    pub degenerate: bool,
}

/// R@1 and R@10 analogues over a set of retrievals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStats {
    pub r_at_1: f64,
    pub r_at_10: f64,
    pub degenerate: usize,
    pub count: usize,
}

impl RetrievalStats {
    pub fn from_retrievals(rs: &[Retrieval]) -> Self {
        let n = rs.len().max(1) as f64;
        Self {
            r_at_1: rs.iter().filter(|r| r.rank <= 1).count() as f64 / n,
            r_at_10: rs.iter().filter(|r| r.rank <= 10).count() as f64 / n,
            degenerate: rs.iter().filter(|r| r.degenerate).count(),
            count: rs.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_signatures(c: &Caption, res: usize) -> Vec<ViewSignature> {
        let spec = SceneSpec::canonical(c);
        retrieval_cameras()
            .iter()
            .map(|cam| {
                let v = render_oracle_view(&spec, cam, res, res).unwrap();
                let rgb: Vec<f64> = v.rgb.iter().map(|&x| x as f64).collect();
                let cov: Vec<f64> = v.mask.iter().map(|&m| m as f64).collect();
                ViewSignature::new(&rgb, &cov)
            })
            .collect()
    }

    #[test]
    fn canonical_views_retrieve_their_caption() {
        let idx = OracleIndex::full(24).unwrap();
        for c in ["red sphere", "blue cube", "yellow torus on green cylinder"] {
            let c: Caption = c.parse().unwrap();
            let r = idx.retrieve(&oracle_signatures(&c, 24), &c);
            assert_eq!(r.rank, 1, "{c}");
            assert!(!r.degenerate);
        }
    }

    #[test]
    fn empty_views_are_degenerate_and_rank_last() {
        let idx = OracleIndex::new(Caption::enumerate()[..20].to_vec(), 16).unwrap();
        let empty = vec![ViewSignature::new(&[0.0; 768], &[0.0; 256]); 4];
        let r = idx.retrieve(&empty, &"red sphere".parse().unwrap());
        assert!(r.degenerate);
        assert_eq!(r.rank, 20);
    }

    #[test]
    fn ranking_ignores_candidate_order() {
        let caps: Vec<Caption> = Caption::enumerate()[..20].to_vec();
        let mut rev = caps.clone();
        rev.reverse();
        let truth: Caption = "green cylinder".parse().unwrap();
        let views = oracle_signatures(&"green cube".parse().unwrap(), 16);
        let a = OracleIndex::new(caps, 16).unwrap().retrieve(&views, &truth);
        let b = OracleIndex::new(rev, 16).unwrap().retrieve(&views, &truth);
        assert_eq!(a, b);
        assert!(a.rank > 1);
    }

    #[test]
    fn stats() {
        let r = |rank| Retrieval { rank, score: 0.0, degenerate: false };
        let s = RetrievalStats::from_retrievals(&[r(1), r(5), r(30), r(1)]);
        assert_eq!((s.r_at_1, s.r_at_10, s.count), (0.5, 0.75, 4));
    }
}
