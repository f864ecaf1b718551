//! Axis-aligned boxes, overlap and non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open rectangle `[x0, x1) × [y0, y1)` in pixel units with a
/// confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub score: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Result<Self> {
        let b = Self {
            x0,
            y0,
            x1,
            y1,
            score,
        };
        if !b.is_valid() {
            return Err(Error::Shape(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    /// Unscored box; panics on an empty extent. Convenient for literals.
    pub fn unscored(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(x0, y0, x1, y1, 0.0).expect("non-empty box")
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x0: cx - w / 2.0,
            y0: cy - h / 2.0,
            x1: cx + w / 2.0,
            y1: cy + h / 2.0,
            score: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1, self.score]
            .iter()
            .all(|v| v.is_finite())
            && self.x0 < self.x1
            && self.y0 < self.y1
            && (0.0..=1.0).contains(&self.score)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection with `[0, width) × [0, height)`, or `None` when empty.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x0: self.x0.max(0.0),
            y0: self.y0.max(0.0),
            x1: self.x1.min(width),
            y1: self.y1.min(height),
            score: self.score,
        };
        (b.x0 < b.x1 && b.y0 < b.y1).then_some(b)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width && self.y1 <= height
    }

    fn coords(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// Intersection over union; disjoint or degenerate pairs give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Descending score, then ascending `(x0, y0, x1, y1)`.
pub fn score_order(a: &BBox, b: &BBox) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        a.coords()
            .iter()
            .zip(b.coords().iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Greedy non-maximum suppression: walk boxes in [`score_order`], keep a
/// box unless a previously kept box overlaps it with IoU ≥ `threshold`.
pub fn nms(boxes: &[BBox], threshold: f64) -> Vec<BBox> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(score_order);
    let mut kept: Vec<BBox> = Vec::with_capacity(sorted.len());
    for b in sorted {
        if kept.iter().all(|k| iou(k, &b) < threshold) {
            kept.push(b);
        }
    }
    kept
}
