//! Reference boxes tiled over the image and the box-delta parameterisation
//! used by both regression heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// Box side lengths in pixels.
    pub scales: Vec<f64>,
    /// Width / height ratios.
    pub aspect_ratios: Vec<f64>,
    /// Anchor grid spacing in pixels.
    pub stride: usize,
    /// Boxes need a score strictly above this to be reported.
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![8.0, 16.0, 24.0],
            aspect_ratios: vec![1.0],
            stride: 8,
            score_threshold: 0.5,
            nms_iou: 0.5,
            top_k: 64,
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !positive(&self.scales) || !positive(&self.aspect_ratios) {
            return Err(Error::Config(
                "anchors: scales and ratios must be positive".into(),
            ));
        }
        if self.stride == 0 || self.top_k == 0 {
            return Err(Error::Config(
                "anchors: stride and top_k must be positive".into(),
            ));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config("anchors: nms_iou must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(Error::Config(
                "anchors: score_threshold must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One anchor per (cell, scale, ratio), centred on its cell and clipped to
/// the image. Ordered row-major over cells, then scales, then ratios.
pub fn generate_anchors(width: usize, height: usize, config: &AnchorConfig) -> Vec<BBox> {
    let s = config.stride;
    let (gw, gh) = (width.div_ceil(s), height.div_ceil(s));
    let mut out = Vec::with_capacity(gw * gh * config.anchors_per_cell());
    for cy in 0..gh {
        for cx in 0..gw {
            let (px, py) = ((cx as f64 + 0.5) * s as f64, (cy as f64 + 0.5) * s as f64);
            for &scale in &config.scales {
                for &ratio in &config.aspect_ratios {
                    let w = scale * ratio.sqrt();
                    let h = scale / ratio.sqrt();
                    let b = BBox::from_center(px, py, w, h);
                    out.push(b.clip(width as f64, height as f64).unwrap_or(b));
                }
            }
        }
    }
    out
}

/// Largest allowed log-scale delta, avoiding overflow in `exp`.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Offsets `(dx, dy, dw, dh)` taking `reference` to `target`.
pub fn encode_deltas(reference: &BBox, target: &BBox) -> [f64; 4] {
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    let (rw, rh) = (reference.width(), reference.height());
    [
        (tx - rx) / rw,
        (ty - ry) / rh,
        (target.width() / rw).ln(),
        (target.height() / rh).ln(),
    ]
}

/// Inverse of [`encode_deltas`]; the score is taken from `reference`.
pub fn decode_deltas(reference: &BBox, d: &[f64]) -> BBox {
    let (rx, ry) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let w = rw * d[2].min(MAX_LOG_SCALE).exp();
    let h = rh * d[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(rx + d[0] * rw, ry + d[1] * rh, w, h).with_score(reference.score)
}
